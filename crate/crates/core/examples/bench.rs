//! Desk-scale benchmark: simulate a polychromatic Poisson scan of the
//! defects phantom and compare FBP, linearized FBP, linearized BPDN, and
//! the blind NPG-BFGS reconstruction.
//!
//! Usage: bench [side] [n_angles] [u_npg] [u_bpdn] [seed]

use std::time::Instant;

use polyct_core::model::NoiseModel;
use polyct_core::pipeline::{
    baseline, make_phantom, rse, simulate, BaselineMethod, PhantomKind, SimulationSpec,
};
use polyct_core::projector::{fbp, FanBeamGeometry, FbpFilter};
use polyct_core::prox::Regularizer;
use polyct_core::solvers::{BlockSolver, OuterConfig, SolverVariant};
use polyct_core::spectrum::{build_knots, CurveSegment, EnergySpectrumTable, MassAttenuationCurve};

fn synthetic_physics() -> (MassAttenuationCurve, EnergySpectrumTable) {
    let n = 600;
    let energies: Vec<f64> = (0..n).map(|i| 20.0 + 120.0 * i as f64 / (n - 1) as f64).collect();
    let kappas: Vec<f64> = energies.iter().map(|&e| (e / 60.0).powi(-3)).collect();
    let curve =
        MassAttenuationCurve::new(vec![CurveSegment::new(energies.clone(), kappas).unwrap()]).unwrap();
    let densities: Vec<f64> = energies
        .iter()
        .map(|&e| {
            let t = (e - 20.0) / 120.0;
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * (t - 0.5)).cos().max(-1.0)
        })
        .collect();
    let table = EnergySpectrumTable::new(energies, densities).unwrap();
    (curve, table)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let side: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(128);
    let n_angles: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let u_npg: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-5);
    let u_bpdn: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1);

    let truth = make_phantom(side, PhantomKind::Defects).unwrap();
    let (curve, table) = synthetic_physics();
    let geom = FanBeamGeometry::equispaced(side, 4.0 * side as f64, side, 1.1, n_angles).unwrap();
    let spec = SimulationSpec {
        geometry: geom.clone(),
        curve,
        table,
        grid: build_knots(1e3, 1.5, 100).unwrap(),
        energy_samples: 130,
        max_count: 65536.0,
        min_count: 20.0,
        seed,
        noise: NoiseModel::Poisson,
    };
    let t0 = Instant::now();
    let sim = simulate(&spec, &truth).unwrap();
    println!(
        "sim: {:.2?}, path_scale={:.4e}, norm={:.4e}",
        t0.elapsed(),
        sim.sinogram.path_scale,
        sim.sinogram.normalization
    );
    let e = &sim.sinogram.values;
    let phi = &sim.phi;

    // FBP
    let t = Instant::now();
    let (img_fbp, _) = baseline(&BaselineMethod::Fbp, e, &geom, phi, None, None).unwrap();
    println!("fbp      rse={:.4e}  ({:.2?})", rse(img_fbp.as_slice(), truth.as_slice()).unwrap(), t.elapsed());

    // lin-FBP
    let t = Instant::now();
    let (img_lfbp, _) =
        baseline(&BaselineMethod::LinFbp, e, &geom, phi, Some(&sim.spectrum), None).unwrap();
    println!(
        "lin-fbp  rse={:.4e}  ({:.2?})",
        rse(img_lfbp.as_slice(), truth.as_slice()).unwrap(),
        t.elapsed()
    );

    // lin-BPDN
    let t = Instant::now();
    let mut cfg = OuterConfig::new(NoiseModel::Poisson, Some(Regularizer::Tv { weight: u_bpdn }));
    cfg.max_outer = 2000;
    let (img_bpdn, res) = baseline(
        &BaselineMethod::LinBpdn { config: cfg },
        e,
        &geom,
        phi,
        Some(&sim.spectrum),
        Some(&truth),
    )
    .unwrap();
    let res = res.unwrap();
    println!(
        "lin-bpdn rse={:.4e}  iters={} term={:?} ({:.2?})",
        rse(img_bpdn.as_slice(), truth.as_slice()).unwrap(),
        res.trace.len(),
        res.termination,
        t.elapsed()
    );

    // blind NPG-BFGS
    let t = Instant::now();
    let grid_blind = build_knots(1e3, 1.5, 30).unwrap();
    let mut cfg = OuterConfig::new(NoiseModel::Poisson, Some(Regularizer::Tv { weight: u_npg }));
    cfg.max_outer = 2000;
    // initial point: FBP scaled to undo the path calibration
    let y: Vec<f64> = e.iter().map(|&v| -v.ln()).collect();
    let alpha0 = fbp(&y, &geom, FbpFilter::Hann).unwrap().scaled(1.0 / sim.sinogram.path_scale);
    let solver = BlockSolver::new(e, phi, &grid_blind, &geom, cfg)
        .with_alpha_init(alpha0)
        .with_truth(&truth);
    let result = solver.run(SolverVariant::NpgBfgs).unwrap();
    println!(
        "npg-bfgs rse={:.4e}  iters={} term={:?} ({:.2?})",
        rse(result.alpha_hat.as_slice(), truth.as_slice()).unwrap(),
        result.trace.len(),
        result.termination,
        t.elapsed()
    );
    let tr = &result.trace;
    let k = tr.len();
    for i in [0, k / 4, k / 2, 3 * k / 4, k.saturating_sub(1)] {
        if i < k {
            println!(
                "  it {:4}: obj={:.6e} nll={:.6e} beta={:.3e} delta={:.3e} rse={:.4e}",
                i + 1,
                tr.objective[i],
                tr.nll[i],
                tr.beta[i],
                tr.delta[i],
                tr.rse[i]
            );
        }
    }
}
