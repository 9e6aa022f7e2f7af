//! Polychromatic forward model and measurement likelihoods.
//!
//! With monochromatic projections `s = Φα`, the noiseless detector energies
//! are `I_out = b_∘^L(s) I` and the incident energy is `I_in = b^L(0) I`.
//! Both the lognormal and Poisson negative log-likelihoods, their gradients
//! in `α` and `I`, and the spectrum-block Hessians have closed forms through
//! the Laplace transforms of the B1 basis.

use thiserror::Error;

use crate::projector::SystemMatrix;
use crate::spectrum::{output_matrix_unchecked, KnotGrid, OutputMatrix, ShapeConstraint};
use crate::Image;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("degenerate spectrum: coefficients are all zero")]
    DegenerateSpectrum,
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Measurement noise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    Lognormal,
    Poisson,
}

/// Forward model: projection operator plus spectral basis.
#[derive(Debug, Clone)]
pub struct ForwardModel<'a> {
    pub phi: &'a SystemMatrix,
    pub grid: &'a KnotGrid,
}

/// Per-`α` evaluation state: the monochromatic projections `s = Φα` and the
/// output basis matrix `A = b_∘^L(s)`. Rebuilt whenever `α` changes; immutable
/// afterwards, so concurrent readers are safe.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub s: Vec<f64>,
    pub a: OutputMatrix,
    grid: KnotGrid,
}

impl<'a> ForwardModel<'a> {
    pub fn new(phi: &'a SystemMatrix, grid: &'a KnotGrid) -> Self {
        ForwardModel { phi, grid }
    }

    /// Builds the cached state for a density map.
    pub fn state(&self, alpha: &Image) -> Result<ForwardState> {
        if alpha.len() != self.phi.ncols() {
            return Err(ModelError::InvalidArgument(format!(
                "expected {} pixels, got {}",
                self.phi.ncols(),
                alpha.len()
            )));
        }
        if alpha.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidArgument("density map must be finite".into()));
        }
        let s = self.phi.project(alpha.as_slice()).expect("shape checked");
        let a = output_matrix_unchecked(self.grid, &s, 0);
        Ok(ForwardState { s, a, grid: self.grid.clone() })
    }

    /// Noiseless outputs `(I_out, I_in)` for a coefficient vector.
    pub fn forward(&self, alpha: &Image, coeffs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let state = self.state(alpha)?;
        let out = state.intensities(coeffs)?;
        let inc = state.incident(coeffs);
        Ok((out, inc))
    }
}

fn check_coeffs(coeffs: &[f64], j_count: usize) -> Result<()> {
    if coeffs.len() != j_count {
        return Err(ModelError::InvalidArgument(format!(
            "expected {} coefficients, got {}",
            j_count,
            coeffs.len()
        )));
    }
    if coeffs.iter().all(|&c| c == 0.0) {
        return Err(ModelError::DegenerateSpectrum);
    }
    if coeffs.iter().any(|&c| !c.is_finite() || c < 0.0) {
        return Err(ModelError::InvalidArgument("coefficients must be finite and >= 0".into()));
    }
    Ok(())
}

fn check_measurements(e: &[f64], n: usize) -> Result<()> {
    if e.len() != n {
        return Err(ModelError::InvalidMeasurement(format!(
            "expected {} measurements, got {}",
            n,
            e.len()
        )));
    }
    if let Some(bad) = e.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(ModelError::InvalidMeasurement(format!("nonpositive measurement {bad}")));
    }
    Ok(())
}

impl ForwardState {
    /// `I_out = A I`, strictly positive for admissible coefficients.
    pub fn intensities(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_coeffs(coeffs, self.a.cols)?;
        Ok(self.a.mul_vec(coeffs))
    }

    /// `I_in = b^L(0) I`.
    pub fn incident(&self, coeffs: &[f64]) -> f64 {
        let knots = self.grid.knots();
        (1..=self.grid.spline_count())
            .map(|j| coeffs[j - 1] * (knots[j + 1] - knots[j - 1]) / 2.0)
            .sum()
    }

    /// First s-derivative matrix `Ȧ[n][j] = d/ds b_j^L(s_n)` (entries are
    /// negative); computed on demand for gradients in `α`.
    pub fn deriv_matrix(&self) -> OutputMatrix {
        output_matrix_unchecked(&self.grid, &self.s, 1)
    }

    /// Negative log-likelihood of the measurements.
    pub fn nll(&self, e: &[f64], coeffs: &[f64], noise: NoiseModel) -> Result<f64> {
        check_measurements(e, self.a.rows)?;
        let out = self.intensities(coeffs)?;
        Ok(nll_from_outputs(e, &out, noise))
    }

    /// Gradient of the NLL with respect to the density map.
    pub fn grad_alpha(
        &self,
        phi: &SystemMatrix,
        e: &[f64],
        coeffs: &[f64],
        noise: NoiseModel,
    ) -> Result<Vec<f64>> {
        check_measurements(e, self.a.rows)?;
        let out = self.intensities(coeffs)?;
        let xi_dot = self.deriv_matrix().mul_vec(coeffs);
        let resid: Vec<f64> = match noise {
            NoiseModel::Lognormal => out
                .iter()
                .zip(e)
                .zip(&xi_dot)
                .map(|((&o, &en), &xd)| xd / o * (o.ln() - en.ln()))
                .collect(),
            NoiseModel::Poisson => out
                .iter()
                .zip(e)
                .zip(&xi_dot)
                .map(|((&o, &en), &xd)| xd * (1.0 - en / o))
                .collect(),
        };
        Ok(phi.backproject(&resid).expect("shape checked"))
    }

    /// Gradient of the NLL with respect to the spectrum coefficients.
    pub fn grad_coeffs(&self, e: &[f64], coeffs: &[f64], noise: NoiseModel) -> Result<Vec<f64>> {
        check_measurements(e, self.a.rows)?;
        let out = self.intensities(coeffs)?;
        let w: Vec<f64> = match noise {
            NoiseModel::Lognormal => {
                out.iter().zip(e).map(|(&o, &en)| (o.ln() - en.ln()) / o).collect()
            }
            NoiseModel::Poisson => out.iter().zip(e).map(|(&o, &en)| 1.0 - en / o).collect(),
        };
        Ok(self.a.tr_mul_vec(&w))
    }

    /// Hessian of the NLL with respect to the spectrum coefficients
    /// (row-major `J x J`).
    pub fn hessian_coeffs(&self, e: &[f64], coeffs: &[f64], noise: NoiseModel) -> Result<Vec<f64>> {
        check_measurements(e, self.a.rows)?;
        let out = self.intensities(coeffs)?;
        let j = self.a.cols;
        let diag: Vec<f64> = match noise {
            NoiseModel::Lognormal => out
                .iter()
                .zip(e)
                .map(|(&o, &en)| (1.0 - o.ln() + en.ln()) / (o * o))
                .collect(),
            NoiseModel::Poisson => out.iter().zip(e).map(|(&o, &en)| en / (o * o)).collect(),
        };
        let mut h = vec![0.0; j * j];
        for n in 0..self.a.rows {
            let row = self.a.row(n);
            let d = diag[n];
            for p in 0..j {
                let rp = row[p] * d;
                if rp == 0.0 {
                    continue;
                }
                for q in 0..j {
                    h[p * j + q] += rp * row[q];
                }
            }
        }
        Ok(h)
    }
}

/// NLL from precomputed outputs.
///
/// Lognormal: `1/2 ||ln E - ln I_out||²`; Poisson (generalized KL):
/// `1ᵀ(I_out - E) - Eᵀ(ln I_out - ln E)`. Both vanish iff `I_out = E`.
pub fn nll_from_outputs(e: &[f64], out: &[f64], noise: NoiseModel) -> f64 {
    match noise {
        NoiseModel::Lognormal => {
            0.5 * e
                .iter()
                .zip(out)
                .map(|(&en, &o)| {
                    let r = en.ln() - o.ln();
                    r * r
                })
                .sum::<f64>()
        }
        NoiseModel::Poisson => e
            .iter()
            .zip(out)
            .map(|(&en, &o)| (o - en) - en * (o.ln() - en.ln()))
            .sum::<f64>(),
    }
}

/// Biconvexity bounds from the sufficient-region constants:
/// `U = 2 q^{j0} / (q^{j0} - 1)²` and `V = 2 q^{j0} / (q^{2 j0} + 1)`.
pub fn convexity_bounds(q: f64, j0: usize) -> Result<(f64, f64)> {
    if !(q > 1.0) || !q.is_finite() {
        return Err(ModelError::InvalidArgument(format!("q must be > 1, got {q}")));
    }
    if j0 < 1 {
        return Err(ModelError::InvalidArgument("j0 must be >= 1".into()));
    }
    let g = q.powi(j0 as i32);
    let u = 2.0 * g / ((g - 1.0) * (g - 1.0));
    let v = 2.0 * g / (g * g + 1.0);
    Ok((u, v))
}

/// Region-membership certificate for the biconvexity sufficient conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityCertificate {
    pub u: f64,
    pub v: f64,
    pub j0: usize,
    pub in_region: bool,
    /// Most violated normalized slack; nonnegative iff `in_region`.
    pub worst_margin: f64,
    pub residual_ok: bool,
    pub shape_ok: bool,
    pub alpha_ok: bool,
    /// Per-measurement log residuals `ln E_n - ln I_out,n`.
    pub residuals: Vec<f64>,
}

/// Checks whether `(α, I)` lies in the sufficient biconvexity region:
/// residual bounds from `U`/`V`, the unimodal shape set for `I`, and `α ⪰ 0`.
/// The certificate is diagnostic only and never gates the solver.
pub fn region_check(
    model: &ForwardModel,
    e: &[f64],
    alpha: &Image,
    coeffs: &[f64],
    noise: NoiseModel,
    shape: ShapeConstraint,
) -> Result<ConvexityCertificate> {
    let j_count = model.grid.spline_count();
    let min_j0 = (j_count + 2) / 2;
    if shape.j0 < min_j0 || shape.j0 > j_count {
        return Err(ModelError::InvalidArgument(format!(
            "j0 = {} outside [{min_j0}, {j_count}]",
            shape.j0
        )));
    }
    let state = model.state(alpha)?;
    check_measurements(e, state.a.rows)?;
    let out = state.intensities(coeffs)?;
    let (u, v) = convexity_bounds(model.grid.q(), shape.j0)?;

    let residuals: Vec<f64> = e.iter().zip(&out).map(|(&en, &o)| en.ln() - o.ln()).collect();
    let mut worst = f64::INFINITY;
    let residual_ok;
    match noise {
        NoiseModel::Lognormal => {
            // e^{-U} E ⪯ I_out ⪯ e E, i.e. -1 ≤ ln E - ln I_out ≤ U.
            for &r in &residuals {
                worst = worst.min(u - r).min(r + 1.0);
            }
            residual_ok = residuals.iter().all(|&r| r <= u && r >= -1.0);
        }
        NoiseModel::Poisson => {
            // I_out ⪰ (1-V) E, with ratio slack normalized by E.
            let mut w = f64::INFINITY;
            for (&en, &o) in e.iter().zip(&out) {
                w = w.min(o / en - (1.0 - v));
            }
            residual_ok = w >= 0.0;
            worst = worst.min(w);
        }
    }

    // Shape set: nondecreasing over the low-κ block, nonincreasing over the
    // high-κ block, middle block dominating the low-block end value.
    let scale = coeffs.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let low_end = j_count + 1 - shape.j0; // 1-based boundary index
    let mut shape_worst = f64::INFINITY;
    for j in 1..low_end {
        shape_worst = shape_worst.min((coeffs[j] - coeffs[j - 1]) / scale);
    }
    for j in shape.j0..j_count {
        shape_worst = shape_worst.min((coeffs[j - 1] - coeffs[j]) / scale);
    }
    for j in low_end..=shape.j0 {
        shape_worst = shape_worst.min((coeffs[j - 1] - coeffs[low_end - 1]) / scale);
    }
    let shape_ok = shape_worst >= 0.0;
    worst = worst.min(shape_worst);

    let ascale =
        alpha.as_slice().iter().cloned().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let alpha_worst = alpha.as_slice().iter().cloned().fold(f64::INFINITY, f64::min) / ascale;
    let alpha_ok = alpha_worst >= 0.0;
    worst = worst.min(alpha_worst);

    Ok(ConvexityCertificate {
        u,
        v,
        j0: shape.j0,
        in_region: residual_ok && shape_ok && alpha_ok,
        worst_margin: worst,
        residual_ok,
        shape_ok,
        alpha_ok,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{build_system_matrix, FanBeamGeometry};
    use crate::spectrum::build_knots;
    use approx::assert_relative_eq;

    fn tiny_setup() -> (crate::projector::SystemMatrix, KnotGrid) {
        let geom = FanBeamGeometry::equispaced(8, 24.0, 10, 1.0, 6).unwrap();
        (build_system_matrix(&geom).unwrap(), build_knots(100.0, 1.0, 8).unwrap())
    }

    #[test]
    fn forward_zero_alpha_gives_triangle_areas() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let mut coeffs = vec![0.0; 8];
        coeffs[3] = 1.0;
        let (out, inc) = model.forward(&Image::zeros(8), &coeffs).unwrap();
        let knots = grid.knots();
        let area = (knots[5] - knots[3]) / 2.0;
        for v in &out {
            assert_relative_eq!(*v, area, max_relative = 1e-13);
        }
        assert_relative_eq!(inc, area, max_relative = 1e-13);
    }

    #[test]
    fn forward_rejects_zero_spectrum() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let err = model.forward(&Image::zeros(8), &vec![0.0; 8]).unwrap_err();
        assert_eq!(err, ModelError::DegenerateSpectrum);
    }

    #[test]
    fn forward_monotone_in_alpha() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let coeffs = vec![0.1, 0.4, 1.0, 1.4, 1.0, 0.4, 0.2, 0.1];
        let a1 = Image::from_vec(8, vec![0.02; 64]);
        let a2 = Image::from_vec(8, vec![0.03; 64]);
        let (o1, _) = model.forward(&a1, &coeffs).unwrap();
        let (o2, _) = model.forward(&a2, &coeffs).unwrap();
        for (x, y) in o1.iter().zip(&o2) {
            assert!(y <= x);
            assert!(*y > 0.0);
        }
    }

    #[test]
    fn nll_zero_iff_exact_fit_and_hand_values() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let coeffs = vec![0.1, 0.4, 1.0, 1.4, 1.0, 0.4, 0.2, 0.1];
        let alpha = Image::from_vec(8, vec![0.02; 64]);
        let state = model.state(&alpha).unwrap();
        let out = state.intensities(&coeffs).unwrap();
        assert!(state.nll(&out, &coeffs, NoiseModel::Lognormal).unwrap().abs() < 1e-14);
        assert!(state.nll(&out, &coeffs, NoiseModel::Poisson).unwrap().abs() < 1e-12);
        // single measurement E = e², I_out = e
        let e = std::f64::consts::E;
        let ln_val = nll_from_outputs(&[e * e], &[e], NoiseModel::Lognormal);
        assert_relative_eq!(ln_val, 0.5, max_relative = 1e-13);
        let poiss = nll_from_outputs(&[e * e], &[e], NoiseModel::Poisson);
        assert_relative_eq!(poiss, e, max_relative = 1e-13);
        // invalid measurements
        assert!(state.nll(&vec![0.0; out.len()], &coeffs, NoiseModel::Poisson).is_err());
    }

    #[test]
    fn poisson_nll_nonnegative_on_random_probes() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let coeffs = vec![0.1, 0.4, 1.0, 1.4, 1.0, 0.4, 0.2, 0.1];
        let alpha = Image::from_vec(8, vec![0.015; 64]);
        let state = model.state(&alpha).unwrap();
        let out = state.intensities(&coeffs).unwrap();
        let mut seed = 42u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let e: Vec<f64> = out.iter().map(|&o| o * (0.25 + 1.5 * rnd())).collect();
            assert!(state.nll(&e, &coeffs, NoiseModel::Poisson).unwrap() >= 0.0);
        }
    }

    #[test]
    fn gradients_vanish_at_exact_fit() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        let coeffs = vec![0.1, 0.4, 1.0, 1.4, 1.0, 0.4, 0.2, 0.1];
        let alpha = Image::from_vec(8, vec![0.02; 64]);
        let state = model.state(&alpha).unwrap();
        let out = state.intensities(&coeffs).unwrap();
        for noise in [NoiseModel::Lognormal, NoiseModel::Poisson] {
            let ga = state.grad_alpha(&phi, &out, &coeffs, noise).unwrap();
            assert!(ga.iter().all(|v| v.abs() < 1e-12));
            let gi = state.grad_coeffs(&out, &coeffs, noise).unwrap();
            assert!(gi.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn convexity_bounds_reference_values() {
        // q^{j0} = 10^{1.6}
        let q = 10f64.powf(0.1);
        let (u, v) = convexity_bounds(q, 16).unwrap();
        let g: f64 = 10f64.powf(1.6);
        assert_relative_eq!(u, 2.0 * g / ((g - 1.0) * (g - 1.0)), max_relative = 1e-13);
        assert_relative_eq!(v, 2.0 * g / (g * g + 1.0), max_relative = 1e-13);
        assert_relative_eq!(u, 0.052860, max_relative = 1e-4);
        assert_relative_eq!(v, 0.050206, max_relative = 1e-4);
        assert!(convexity_bounds(0.9, 16).is_err());
    }

    #[test]
    fn convexity_bounds_limits() {
        // Monotone decrease toward zero as q^{j0} grows.
        let mut prev_u = f64::INFINITY;
        let mut prev_v = f64::INFINITY;
        for e in 1..=12 {
            let (u, v) = convexity_bounds(1.5, e).unwrap();
            assert!(u < prev_u && v < prev_v);
            prev_u = u;
            prev_v = v;
        }
        assert!(prev_u < 0.1 && prev_v < 0.1);
        // Pole as q^{j0} -> 1+.
        let (u, _) = convexity_bounds(1.0 + 1e-4, 1).unwrap();
        assert!(u > 1e6);
        // U, V > 0 and V < 1 whenever q^{j0} > 1.
        for e in 1..=8 {
            let (u, v) = convexity_bounds(1.2, e).unwrap();
            assert!(u > 0.0 && v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn region_check_interior_and_violations() {
        let (phi, grid) = tiny_setup();
        let model = ForwardModel::new(&phi, &grid);
        // Unimodal spectrum peaked at the center knots.
        let coeffs = vec![0.1, 0.4, 1.0, 1.4, 1.4, 0.4, 0.2, 0.1];
        let alpha = Image::from_vec(8, vec![0.02; 64]);
        let state = model.state(&alpha).unwrap();
        let out = state.intensities(&coeffs).unwrap();
        let shape = ShapeConstraint::minimal(8);
        for noise in [NoiseModel::Lognormal, NoiseModel::Poisson] {
            let cert = region_check(&model, &out, &alpha, &coeffs, noise, shape).unwrap();
            assert!(cert.in_region, "{noise:?}: {cert:?}");
            assert!(cert.worst_margin >= 0.0);
        }
        // Strictly decreasing coefficients violate the low-κ block.
        let bad = vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];
        let out_bad = state.intensities(&bad).unwrap();
        let cert = region_check(&model, &out_bad, &alpha, &bad, NoiseModel::Poisson, shape).unwrap();
        assert!(!cert.shape_ok);
        assert!(!cert.in_region);
        // Residual exceeding U by 0.01.
        let (u, _) = convexity_bounds(grid.q(), shape.j0).unwrap();
        let e_pert: Vec<f64> = out.iter().map(|&o| o * (u + 0.01).exp()).collect();
        let cert =
            region_check(&model, &e_pert, &alpha, &coeffs, NoiseModel::Lognormal, shape).unwrap();
        assert!(!cert.in_region);
        assert_relative_eq!(cert.worst_margin, -0.01, max_relative = 1e-9);
        // Invalid j0.
        assert!(region_check(
            &model,
            &out,
            &alpha,
            &coeffs,
            NoiseModel::Poisson,
            ShapeConstraint { j0: 3 }
        )
        .is_err());
    }
}
