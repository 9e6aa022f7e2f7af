//! Measurement simulation, phantoms, linearization baselines, and metrics.
//!
//! Simulation works in the photon-energy domain: noiseless means are Riemann
//! sums of `ι(ε) exp(-κ(ε) path)` over an equi-spaced energy grid. A
//! two-parameter calibration (a global path-length factor folded into `Φ`
//! and an intensity factor on `ι`) pins the maximum and minimum noiseless
//! measurements to configured counts before noise is drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::NoiseModel;
use crate::projector::{build_system_matrix, fbp, FanBeamGeometry, FbpFilter, SystemMatrix};
use crate::solvers::{lin_bpdn, OuterConfig, ReconResult, SolverError};
use crate::spectrum::{
    construct_spectrum, EnergySpectrumTable, KnotGrid, MassAttenuationCurve,
    MassAttenuationSpectrum, SpectrumError,
};
use crate::Image;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calibration failure: {0}")]
    CalibrationFailure(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("degenerate spectrum")]
    DegenerateSpectrum,
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Projector(#[from] crate::projector::ProjectorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Built-in deterministic phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// Single centered disk of value 1, radius n/4.
    Disks,
    /// Annulus with an inner void and a dense core.
    Nested,
    /// Non-convex blob with interior voids and an isolated ball, the
    /// streak-prone layout.
    Defects,
}

impl PhantomKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disks" => Some(PhantomKind::Disks),
            "nested" => Some(PhantomKind::Nested),
            "defects" => Some(PhantomKind::Defects),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::Disks => "disks",
            PhantomKind::Nested => "nested",
            PhantomKind::Defects => "defects",
        }
    }
}

/// Deterministic nonnegative phantom with values in [0, 1].
pub fn make_phantom(side: usize, kind: PhantomKind) -> Result<Image> {
    if side < 16 {
        return Err(PipelineError::InvalidArgument(format!("side {side} must be >= 16")));
    }
    let n = side as f64;
    let mut img = Image::zeros(side);
    let disk = |x: f64, y: f64, cx: f64, cy: f64, r: f64| -> bool {
        (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
    };
    for row in 0..side {
        for col in 0..side {
            let x = (col as f64 + 0.5 - n / 2.0) / n; // [-0.5, 0.5]
            let y = ((side - 1 - row) as f64 + 0.5 - n / 2.0) / n;
            let v = match kind {
                PhantomKind::Disks => {
                    if disk(x, y, 0.0, 0.0, 0.25) {
                        1.0
                    } else {
                        0.0
                    }
                }
                PhantomKind::Nested => {
                    if disk(x, y, 0.0, 0.0, 0.07) {
                        1.0
                    } else if disk(x, y, 0.0, 0.0, 0.17) {
                        0.0
                    } else if disk(x, y, 0.0, 0.0, 0.38) {
                        0.8
                    } else {
                        0.0
                    }
                }
                PhantomKind::Defects => {
                    // Body: two fused disks with a non-convex bite.
                    let body = (disk(x, y, -0.08, -0.02, 0.28) || disk(x, y, 0.18, 0.06, 0.15))
                        && !disk(x, y, -0.26, -0.26, 0.16);
                    // Interior zero-valued voids.
                    let void1 = disk(x, y, -0.13, 0.07, 0.045);
                    let void2 = disk(x, y, 0.02, -0.12, 0.03);
                    // Isolated small ball above the body.
                    let ball = disk(x, y, 0.26, 0.33, 0.05);
                    if body && !(void1 || void2) {
                        0.85
                    } else if ball {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            img.set(row, col, v);
        }
    }
    Ok(img)
}

/// Scale-invariant relative squared error
/// `1 - (α̂ᵀα / (||α̂|| ||α||))²`.
pub fn rse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(PipelineError::InvalidArgument("length mismatch".into()));
    }
    let ne = crate::norm2(estimate);
    let nt = crate::norm2(truth);
    if ne == 0.0 || nt == 0.0 {
        return Err(PipelineError::UndefinedMetric("zero vector".into()));
    }
    let c = crate::dot(estimate, truth) / (ne * nt);
    Ok(1.0 - c * c)
}

/// Simulation protocol parameters.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub geometry: FanBeamGeometry,
    pub curve: MassAttenuationCurve,
    pub table: EnergySpectrumTable,
    pub grid: KnotGrid,
    /// Equi-spaced energy discretization points (midpoint rule).
    pub energy_samples: usize,
    pub max_count: f64,
    pub min_count: f64,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl SimulationSpec {
    fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(PipelineError::Projector)?;
        if self.energy_samples < 2 {
            return Err(PipelineError::InvalidArgument("energy_samples must be >= 2".into()));
        }
        if !(self.max_count > self.min_count && self.min_count > 0.0) {
            return Err(PipelineError::InvalidArgument(
                "need max_count > min_count > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Sinogram: positive measurements, normalized so `max = 1`, plus the
/// factors needed to interpret them against a system matrix.
#[derive(Debug, Clone)]
pub struct Sinogram {
    pub values: Vec<f64>,
    /// Largest raw measurement divided out during normalization.
    pub normalization: f64,
    /// Path-length calibration factor folded into the system matrix.
    pub path_scale: f64,
    pub seed: u64,
    pub noise: NoiseModel,
}

/// Everything the simulator produced.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub sinogram: Sinogram,
    /// Noiseless means in the sinogram's normalized units.
    pub noiseless: Vec<f64>,
    /// Ground-truth mass-attenuation spectrum in normalized units, paired
    /// with the calibrated system matrix.
    pub spectrum: MassAttenuationSpectrum,
    /// Calibrated system matrix `c_ℓ Φ`.
    pub phi: SystemMatrix,
    pub intensity_scale: f64,
}

/// Midpoint-rule transmitted energy `Σ ι(ε_k) e^{-κ(ε_k) path} Δε`.
fn transmitted(
    path: f64,
    energies: &[f64],
    densities: &[f64],
    kappas: &[f64],
    de: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..energies.len() {
        acc += densities[i] * (-kappas[i] * path).exp();
    }
    acc * de
}

/// Counter-based per-detector RNG substream, stable under parallel draws.
fn detector_rng(seed: u64, detector: u64) -> ChaCha8Rng {
    let mut z = seed ^ detector.wrapping_mul(0x9E3779B97F4A7C15);
    let mut next = || {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
        x ^ (x >> 31)
    };
    let mut key = [0u8; 32];
    for chunk in 0..4 {
        key[chunk * 8..(chunk + 1) * 8].copy_from_slice(&next().to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Simulates polychromatic measurements for a ground-truth density map.
///
/// Returns the normalized sinogram, the calibrated system matrix, and the
/// ground-truth spectrum (in normalized units) for the non-blind baselines.
pub fn simulate(spec: &SimulationSpec, alpha_true: &Image) -> Result<SimulationOutput> {
    spec.validate()?;
    if alpha_true.as_slice().iter().any(|&v| v < 0.0) {
        return Err(PipelineError::InvalidArgument("ground truth must be nonnegative".into()));
    }
    let phi = build_system_matrix(&spec.geometry)?;
    let paths = phi.project(alpha_true.as_slice())?;
    let s_min = paths.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_max = paths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(s_max > s_min + 1e-12 * s_max.abs()) {
        return Err(PipelineError::CalibrationFailure(
            "noiseless measurements are constant; cannot match max/min targets".into(),
        ));
    }

    // Midpoint energy grid over the incident-spectrum support.
    let (e_lo, e_hi) = spec.table.support();
    let k = spec.energy_samples;
    let de = (e_hi - e_lo) / k as f64;
    let energies: Vec<f64> = (0..k).map(|i| e_lo + de * (i as f64 + 0.5)).collect();
    let densities: Vec<f64> = energies.iter().map(|&e| spec.table.density_at(e)).collect();
    let kappas: Vec<f64> = energies.iter().map(|&e| spec.curve.kappa_at(e)).collect();

    // Outer bisection on the path factor c so that the max/min ratio of the
    // noiseless means matches the target; the intensity factor follows in
    // closed form.
    let target_ratio = spec.max_count / spec.min_count;
    let ratio = |c: f64| -> f64 {
        transmitted(c * s_min, &energies, &densities, &kappas, de)
            / transmitted(c * s_max, &energies, &densities, &kappas, de)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut expand = 0;
    while ratio(hi) < target_ratio {
        hi *= 2.0;
        expand += 1;
        if expand > 200 || !transmitted(hi * s_max, &energies, &densities, &kappas, de).is_normal()
        {
            return Err(PipelineError::CalibrationFailure(
                "max/min ratio unreachable; thickest path underflows".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let path_scale = 0.5 * (lo + hi);
    let intensity_scale =
        spec.max_count / transmitted(path_scale * s_min, &energies, &densities, &kappas, de);

    let means: Vec<f64> = paths
        .par_iter()
        .map(|&s| intensity_scale * transmitted(path_scale * s, &energies, &densities, &kappas, de))
        .collect();

    // Noise with per-detector substreams.
    let noisy: Vec<f64> = means
        .par_iter()
        .enumerate()
        .map(|(n, &m)| {
            let mut rng = detector_rng(spec.seed, n as u64);
            match spec.noise {
                NoiseModel::Poisson => {
                    let draw = Poisson::new(m).expect("positive mean").sample(&mut rng);
                    // Zero counts would put the measurement outside the NLL
                    // domain; clamp to a single count.
                    draw.max(1.0)
                }
                NoiseModel::Lognormal => {
                    // Variance matched to a Poisson count of the same mean.
                    let sigma = (1.0 / m).sqrt().min(2.0);
                    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
                    m * (sigma * z).exp()
                }
            }
        })
        .collect();

    let normalization = noisy.iter().cloned().fold(f64::MIN, f64::max);
    let values: Vec<f64> = noisy.iter().map(|&v| v / normalization).collect();
    let noiseless: Vec<f64> = means.iter().map(|&v| v / normalization).collect();

    // Ground-truth spectrum in the normalized units: scale ι by the
    // intensity calibration and the normalization divisor.
    let table_cal = spec.table.scaled(intensity_scale / normalization);
    let spectrum = construct_spectrum(&spec.curve, &table_cal, &spec.grid)?;

    Ok(SimulationOutput {
        sinogram: Sinogram {
            values,
            normalization,
            path_scale,
            seed: spec.seed,
            noise: spec.noise,
        },
        noiseless,
        spectrum,
        phi: phi.scaled(path_scale),
        intensity_scale,
    })
}

/// Result of inverting the spectrum's Laplace transform on one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearized {
    pub values: Vec<f64>,
    /// Measurements above `υ^L(0)` that were clamped to zero path length.
    pub clamped: Vec<bool>,
}

/// Zero-forcing linearization `y_n = (υ^L)⁻¹(E_n)` by bracketed bisection on
/// the strictly decreasing map `s ↦ b^L(s) I`.
pub fn linearize(e: &[f64], spectrum: &MassAttenuationSpectrum) -> Result<Linearized> {
    if spectrum.coeffs.iter().all(|&c| c == 0.0) {
        return Err(PipelineError::DegenerateSpectrum);
    }
    let incident = spectrum.laplace(0.0, 0);
    let mut values = vec![0.0; e.len()];
    let mut clamped = vec![false; e.len()];
    let results: Vec<(f64, bool)> = e
        .par_iter()
        .map(|&en| {
            if !(en > 0.0) {
                return (f64::NAN, false);
            }
            if en >= incident {
                return (0.0, true);
            }
            // Expand the bracket geometrically, then bisect.
            let mut lo = 0.0;
            let mut hi = 1.0;
            while spectrum.laplace(hi, 0) > en {
                lo = hi;
                hi *= 2.0;
                if hi > 1e12 {
                    break;
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if spectrum.laplace(mid, 0) > en {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if (hi - lo) <= 1e-10 * hi.max(1e-30) {
                    break;
                }
            }
            (0.5 * (lo + hi), false)
        })
        .collect();
    for (i, (v, c)) in results.into_iter().enumerate() {
        if v.is_nan() {
            return Err(PipelineError::InvalidArgument(format!(
                "nonpositive measurement at index {i}"
            )));
        }
        values[i] = v;
        clamped[i] = c;
    }
    Ok(Linearized { values, clamped })
}

/// Linear baseline methods.
#[derive(Debug, Clone)]
pub enum BaselineMethod {
    /// FBP of `-ln E` (ignores the polychromatic source).
    Fbp,
    /// FBP of the linearized measurements (requires a known spectrum).
    LinFbp,
    /// Linearized basis-pursuit denoise via NPG (requires a known spectrum).
    LinBpdn { config: OuterConfig },
}

/// Runs a linear baseline. `spectrum` is required by the `lin-*` methods.
pub fn baseline(
    method: &BaselineMethod,
    e: &[f64],
    geom: &FanBeamGeometry,
    phi: &SystemMatrix,
    spectrum: Option<&MassAttenuationSpectrum>,
    truth: Option<&Image>,
) -> Result<(Image, Option<ReconResult>)> {
    match method {
        BaselineMethod::Fbp => {
            let y: Vec<f64> = e.iter().map(|&v| -v.ln()).collect();
            Ok((fbp(&y, geom, FbpFilter::Hann)?, None))
        }
        BaselineMethod::LinFbp => {
            let spec = spectrum
                .ok_or_else(|| PipelineError::InvalidArgument("lin-fbp requires a spectrum".into()))?;
            let y = linearize(e, spec)?;
            Ok((fbp(&y.values, geom, FbpFilter::Hann)?, None))
        }
        BaselineMethod::LinBpdn { config } => {
            let spec = spectrum
                .ok_or_else(|| PipelineError::InvalidArgument("lin-bpdn requires a spectrum".into()))?;
            let y = linearize(e, spec)?;
            let init = fbp(&y.values, geom, FbpFilter::Hann)?;
            let result = lin_bpdn(&y.values, phi, config, init, truth)?;
            Ok((result.alpha_hat.clone(), Some(result)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{build_knots, CurveSegment};
    use approx::assert_relative_eq;

    #[test]
    fn phantom_examples() {
        let img = make_phantom(32, PhantomKind::Disks).unwrap();
        // Center has value 1 inside radius n/4.
        assert_eq!(img.get(16, 16), 1.0);
        assert_eq!(img.get(0, 0), 0.0);
        let again = make_phantom(32, PhantomKind::Disks).unwrap();
        assert_eq!(img, again);
        assert!(make_phantom(8, PhantomKind::Disks).is_err());
        // Defects phantom has at least two interior zero-valued voids.
        let d = make_phantom(128, PhantomKind::Defects).unwrap();
        let probe = |fx: f64, fy: f64| -> f64 {
            let col = ((fx + 0.5) * 128.0) as usize;
            let row = 127 - ((fy + 0.5) * 128.0) as usize;
            d.get(row, col)
        };
        assert_eq!(probe(-0.13, 0.07), 0.0);
        assert_eq!(probe(0.02, -0.12), 0.0);
        // surrounded by material
        assert!(probe(-0.13, 0.14) > 0.0);
        assert!(probe(0.02, -0.18) > 0.0);
        // isolated ball present
        assert!(probe(0.26, 0.33) > 0.0);
        assert!(d.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rse_properties() {
        let a = vec![1.0, 2.0, 3.0];
        assert!(rse(&a, &a).unwrap().abs() < 1e-15);
        let scaled: Vec<f64> = a.iter().map(|v| 7.0 * v).collect();
        assert!(rse(&scaled, &a).unwrap().abs() < 1e-12);
        let orth = vec![2.0, -1.0, 0.0];
        assert_relative_eq!(rse(&orth, &a).unwrap(), 1.0, max_relative = 1e-12);
        assert!(rse(&[0.0, 0.0, 0.0], &a).is_err());
    }

    fn synthetic_physics() -> (MassAttenuationCurve, EnergySpectrumTable) {
        // κ(ε) = (ε/60)^{-3} on [20, 140] keV, raised-cosine ι.
        let n = 600;
        let energies: Vec<f64> = (0..n).map(|i| 20.0 + 120.0 * i as f64 / (n - 1) as f64).collect();
        let kappas: Vec<f64> = energies.iter().map(|&e| (e / 60.0).powi(-3)).collect();
        let curve =
            MassAttenuationCurve::new(vec![CurveSegment::new(energies.clone(), kappas).unwrap()])
                .unwrap();
        let densities: Vec<f64> = energies
            .iter()
            .map(|&e| {
                let t = (e - 20.0) / 120.0;
                1.0 - (2.0 * std::f64::consts::PI * (t - 0.5)).cos().max(-1.0) * 0.5 - 0.5
            })
            .collect();
        let table = EnergySpectrumTable::new(energies, densities).unwrap();
        (curve, table)
    }

    fn small_spec(seed: u64, noise: NoiseModel) -> SimulationSpec {
        let (curve, table) = synthetic_physics();
        SimulationSpec {
            geometry: FanBeamGeometry::equispaced(32, 96.0, 32, 1.4, 24).unwrap(),
            curve,
            table,
            grid: build_knots(1e3, 1.5, 30).unwrap(),
            energy_samples: 130,
            max_count: 65536.0,
            min_count: 20.0,
            seed,
            noise,
        }
    }

    #[test]
    fn simulate_calibrates_max_min() {
        let spec = small_spec(7, NoiseModel::Poisson);
        let truth = make_phantom(32, PhantomKind::Disks).unwrap();
        let out = simulate(&spec, &truth).unwrap();
        let raw_max = out
            .noiseless
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            * out.sinogram.normalization;
        let raw_min = out.noiseless.iter().cloned().fold(f64::MAX, f64::min)
            * out.sinogram.normalization;
        assert_relative_eq!(raw_max, 65536.0, max_relative = 1e-3);
        assert_relative_eq!(raw_min, 20.0, max_relative = 1e-3);
        // Normalization: max of noisy values is exactly 1.
        let max_val = out.sinogram.values.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max_val, 1.0);
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = small_spec(1234, NoiseModel::Poisson);
        let truth = make_phantom(32, PhantomKind::Nested).unwrap();
        let a = simulate(&spec, &truth).unwrap();
        let b = simulate(&spec, &truth).unwrap();
        assert_eq!(a.sinogram.values, b.sinogram.values);
        let spec2 = small_spec(1235, NoiseModel::Poisson);
        let c = simulate(&spec2, &truth).unwrap();
        assert_ne!(a.sinogram.values, c.sinogram.values);
    }

    #[test]
    fn simulate_rejects_constant_paths() {
        let spec = small_spec(7, NoiseModel::Poisson);
        let truth = Image::zeros(32);
        match simulate(&spec, &truth) {
            Err(PipelineError::CalibrationFailure(_)) => {}
            other => panic!("expected calibration failure, got {other:?}"),
        }
    }

    #[test]
    fn poisson_means_match_monte_carlo() {
        let spec = small_spec(99, NoiseModel::Poisson);
        let truth = make_phantom(32, PhantomKind::Disks).unwrap();
        let base = simulate(&spec, &truth).unwrap();
        let trials = 200;
        let mut sums = vec![0.0; 10];
        for t in 0..trials {
            let mut s = spec.clone();
            s.seed = 10_000 + t;
            let out = simulate(&s, &truth).unwrap();
            for d in 0..10 {
                sums[d] += out.sinogram.values[d] * out.sinogram.normalization;
            }
        }
        for d in 0..10 {
            let mean_raw = base.noiseless[d] * base.sinogram.normalization;
            let mc = sums[d] / trials as f64;
            let sigma = mean_raw.sqrt();
            let bound = 3.0 * sigma / (trials as f64).sqrt();
            assert!(
                (mc - mean_raw).abs() <= bound.max(1e-6 * mean_raw),
                "detector {d}: mc {mc} vs mean {mean_raw} (±{bound})"
            );
        }
    }

    #[test]
    fn linearize_round_trip_and_clamp() {
        let spec = small_spec(3, NoiseModel::Poisson);
        let truth = make_phantom(32, PhantomKind::Disks).unwrap();
        let out = simulate(&spec, &truth).unwrap();
        let lin = linearize(&out.noiseless, &out.spectrum).unwrap();
        for (i, &y) in lin.values.iter().enumerate() {
            if lin.clamped[i] {
                continue;
            }
            let back = out.spectrum.laplace(y, 0);
            assert_relative_eq!(back, out.noiseless[i], max_relative = 1e-8);
        }
        // Monotone: larger measurement, smaller path.
        let mut pairs: Vec<(f64, f64)> =
            out.noiseless.iter().cloned().zip(lin.values.iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(w[0].1 >= w[1].1);
            }
        }
        // Clamp above the incident energy.
        let incident = out.spectrum.laplace(0.0, 0);
        let lin2 = linearize(&[incident * 1.01], &out.spectrum).unwrap();
        assert_eq!(lin2.values[0], 0.0);
        assert!(lin2.clamped[0]);
    }
}
