//! Proximal operators for the density-map regularizers.
//!
//! Two sparsity penalties are supported: isotropic TV over the {top, right}
//! pixel neighborhood, solved by accelerated dual gradient projection, and
//! `||Ψᵀα||_1` in an orthonormal Haar wavelet frame, solved by ADMM. Both
//! include the nonnegativity indicator, so prox outputs are feasible.

use thiserror::Error;

use crate::Image;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ProxError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ADMM diverged: residual grew by more than 1e6 over its initial value")]
    Diverged,
}

type Result<T> = std::result::Result<T, ProxError>;

/// Density-map regularizer `u · r(α)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    /// Isotropic total variation plus nonnegativity.
    Tv { weight: f64 },
    /// `||Ψᵀα||_1` in an orthonormal wavelet basis plus nonnegativity.
    WaveletL1 { weight: f64, levels: usize },
}

impl Regularizer {
    pub fn weight(&self) -> f64 {
        match self {
            Regularizer::Tv { weight } => *weight,
            Regularizer::WaveletL1 { weight, .. } => *weight,
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if !(self.weight() > 0.0) {
            return Err(ProxError::InvalidArgument("regularization weight must be > 0".into()));
        }
        if let Regularizer::WaveletL1 { levels, .. } = self {
            if *levels < 1 {
                return Err(ProxError::InvalidArgument("wavelet levels must be >= 1".into()));
            }
            if side % (1 << levels) != 0 {
                return Err(ProxError::InvalidArgument(format!(
                    "image side {side} not divisible by 2^{levels}"
                )));
            }
        }
        Ok(())
    }

    /// Sparsity part of `r(α)` (the nonnegativity indicator is zero on the
    /// feasible iterates this is evaluated at).
    pub fn value(&self, alpha: &Image) -> f64 {
        match self {
            Regularizer::Tv { .. } => tv_value(alpha),
            Regularizer::WaveletL1 { levels, .. } => {
                dwt(alpha, *levels).unwrap().as_slice().iter().map(|v| v.abs()).sum()
            }
        }
    }
}

/// Inner-iteration settings for the proximal solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxSettings {
    /// ADMM step-size parameter, usually 1.
    pub rho: f64,
    /// Inner stopping tolerance (change / residual norm).
    pub tol: f64,
    /// Inner iteration cap `n_sub`.
    pub max_iters: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        ProxSettings { rho: 1.0, tol: 0.0, max_iters: 20 }
    }
}

impl ProxSettings {
    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.tol >= 0.0) || self.max_iters < 1 {
            return Err(ProxError::InvalidArgument("rho > 0, tol >= 0, max_iters >= 1 required".into()));
        }
        Ok(())
    }
}

/// Componentwise `max(x, 0)`.
pub fn project_nonneg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Componentwise `sign(x) max(|x| - λ, 0)`.
pub fn soft_threshold(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(ProxError::InvalidArgument(format!("threshold must be >= 0, got {lambda}")));
    }
    Ok(x.iter().map(|&v| v.signum() * (v.abs() - lambda).max(0.0)).collect())
}

/// Isotropic TV with neighborhoods {pixel above, pixel to the right}:
/// `Σ_i sqrt(d_up² + d_right²)`.
pub fn tv_value(alpha: &Image) -> f64 {
    let n = alpha.side();
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            let v = alpha.get(r, c);
            let du = if r > 0 { v - alpha.get(r - 1, c) } else { 0.0 };
            let dr = if c + 1 < n { v - alpha.get(r, c + 1) } else { 0.0 };
            acc += (du * du + dr * dr).sqrt();
        }
    }
    acc
}

/// Dual variables of the TV prox, kept across calls for warm starting.
#[derive(Debug, Clone, Default)]
pub struct TvDual {
    up: Vec<f64>,
    right: Vec<f64>,
}

/// `D α`: per-pixel (up-difference, right-difference) fields.
fn tv_forward(alpha: &[f64], n: usize, up: &mut [f64], right: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            up[i] = if r > 0 { alpha[i] - alpha[i - n] } else { 0.0 };
            right[i] = if c + 1 < n { alpha[i] - alpha[i + 1] } else { 0.0 };
        }
    }
}

/// `Dᵀ w` for the pair field.
fn tv_adjoint(up: &[f64], right: &[f64], n: usize, out: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let mut acc = up[i] + right[i];
            if r + 1 < n {
                acc -= up[i + n];
            }
            if c > 0 {
                acc -= right[i - 1];
            }
            out[i] = acc;
        }
    }
}

/// Proximal operator of `λ(TV + nonneg indicator)` by accelerated dual
/// gradient projection with optional warm-started dual variables.
pub fn prox_tv(a: &Image, lambda: f64, settings: &ProxSettings, warm: Option<&mut TvDual>) -> Result<Image> {
    settings.validate()?;
    if !(lambda > 0.0) {
        return Err(ProxError::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    let n = a.side();
    if n * n != a.len() {
        return Err(ProxError::InvalidArgument("image must be square".into()));
    }
    let p = n * n;
    let mut local = TvDual { up: vec![0.0; p], right: vec![0.0; p] };
    let dual: &mut TvDual = match warm {
        Some(w) => {
            if w.up.len() != p {
                *w = TvDual { up: vec![0.0; p], right: vec![0.0; p] };
            }
            w
        }
        None => &mut local,
    };

    let mut wu = dual.up.clone();
    let mut wr = dual.right.clone();
    let mut vu = wu.clone();
    let mut vr = wr.clone();
    let mut theta = 1.0f64;
    let mut alpha = vec![0.0; p];
    let mut alpha_prev = vec![0.0; p];
    let mut gu = vec![0.0; p];
    let mut gr = vec![0.0; p];
    let step = 1.0 / (8.0 * lambda);

    for it in 0..settings.max_iters {
        // α(v) = (a - λ Dᵀ v)_+
        tv_adjoint(&vu, &vr, n, &mut alpha);
        for (o, &av) in alpha.iter_mut().zip(a.as_slice()) {
            *o = (av - lambda * *o).max(0.0);
        }
        tv_forward(&alpha, n, &mut gu, &mut gr);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = (theta - 1.0) / theta_next;
        for i in 0..p {
            // ascent step then projection onto the unit pair-ball
            let mut nu = vu[i] + step * gu[i];
            let mut nr = vr[i] + step * gr[i];
            let norm = (nu * nu + nr * nr).sqrt();
            if norm > 1.0 {
                nu /= norm;
                nr /= norm;
            }
            let du = nu - wu[i];
            let dr = nr - wr[i];
            wu[i] = nu;
            wr[i] = nr;
            vu[i] = nu + momentum * du;
            vr[i] = nr + momentum * dr;
        }
        theta = theta_next;
        if it > 0 && settings.tol > 0.0 {
            let diff: f64 =
                alpha.iter().zip(&alpha_prev).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if diff < settings.tol {
                break;
            }
        }
        alpha_prev.copy_from_slice(&alpha);
    }
    tv_adjoint(&wu, &wr, n, &mut alpha);
    for (o, &av) in alpha.iter_mut().zip(a.as_slice()) {
        *o = (av - lambda * *o).max(0.0);
    }
    dual.up = wu;
    dual.right = wr;
    Ok(Image::from_vec(n, alpha))
}

/// Orthonormal multilevel Haar analysis `Ψᵀ α`.
pub fn dwt(alpha: &Image, levels: usize) -> Result<Image> {
    let n = alpha.side();
    if levels < 1 || n % (1 << levels) != 0 {
        return Err(ProxError::InvalidArgument(format!(
            "side {n} not divisible by 2^{levels}"
        )));
    }
    let mut data = alpha.as_slice().to_vec();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = n;
    let mut scratch = vec![0.0; n];
    for _ in 0..levels {
        // rows
        for r in 0..m {
            for k in 0..m / 2 {
                let a = data[r * n + 2 * k];
                let b = data[r * n + 2 * k + 1];
                scratch[k] = (a + b) * inv_sqrt2;
                scratch[m / 2 + k] = (a - b) * inv_sqrt2;
            }
            data[r * n..r * n + m].copy_from_slice(&scratch[..m]);
        }
        // columns
        for c in 0..m {
            for k in 0..m / 2 {
                let a = data[(2 * k) * n + c];
                let b = data[(2 * k + 1) * n + c];
                scratch[k] = (a + b) * inv_sqrt2;
                scratch[m / 2 + k] = (a - b) * inv_sqrt2;
            }
            for r in 0..m {
                data[r * n + c] = scratch[r];
            }
        }
        m /= 2;
    }
    Ok(Image::from_vec(n, data))
}

/// Inverse transform `Ψ s`.
pub fn idwt(coeffs: &Image, levels: usize) -> Result<Image> {
    let n = coeffs.side();
    if levels < 1 || n % (1 << levels) != 0 {
        return Err(ProxError::InvalidArgument(format!(
            "side {n} not divisible by 2^{levels}"
        )));
    }
    let mut data = coeffs.as_slice().to_vec();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut sizes = Vec::new();
    let mut m = n;
    for _ in 0..levels {
        sizes.push(m);
        m /= 2;
    }
    let mut scratch = vec![0.0; n];
    for &m in sizes.iter().rev() {
        // columns
        for c in 0..m {
            for k in 0..m / 2 {
                let s = data[k * n + c];
                let d = data[(m / 2 + k) * n + c];
                scratch[2 * k] = (s + d) * inv_sqrt2;
                scratch[2 * k + 1] = (s - d) * inv_sqrt2;
            }
            for r in 0..m {
                data[r * n + c] = scratch[r];
            }
        }
        // rows
        for r in 0..m {
            for k in 0..m / 2 {
                let s = data[r * n + k];
                let d = data[r * n + m / 2 + k];
                scratch[2 * k] = (s + d) * inv_sqrt2;
                scratch[2 * k + 1] = (s - d) * inv_sqrt2;
            }
            data[r * n..r * n + m].copy_from_slice(&scratch[..m]);
        }
    }
    Ok(Image::from_vec(n, data))
}

/// Proximal operator of `λ(||Ψᵀ·||_1 + nonneg indicator)` by ADMM with
/// `s⁰ = Ψᵀa`, `υ⁰ = 0`, stopping on primal and dual residuals, and final
/// estimate `(Ψ s)_+`.
pub fn prox_wavelet_admm(
    a: &Image,
    lambda: f64,
    levels: usize,
    settings: &ProxSettings,
) -> Result<Image> {
    settings.validate()?;
    if !(lambda > 0.0) {
        return Err(ProxError::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    let rho = settings.rho;
    let mut s = dwt(a, levels)?;
    let mut dual = Image::zeros(a.side());
    let mut initial_res: Option<f64> = None;
    for _ in 0..settings.max_iters {
        // α step: (a + ρ Ψ(s + υ))_+ / (1 + ρ)
        let mut sum = s.clone();
        for (v, d) in sum.as_mut_slice().iter_mut().zip(dual.as_slice()) {
            *v += d;
        }
        let mut alpha = idwt(&sum, levels)?;
        for (v, &av) in alpha.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *v = ((av + rho * *v) / (1.0 + rho)).max(0.0);
        }
        // s step: soft threshold of Ψᵀα - υ
        let wt = dwt(&alpha, levels)?;
        let mut target = wt.clone();
        for (v, d) in target.as_mut_slice().iter_mut().zip(dual.as_slice()) {
            *v -= d;
        }
        let s_new =
            Image::from_vec(a.side(), soft_threshold(target.as_slice(), lambda / rho)?);
        // dual step and residuals
        let mut primal = 0.0;
        let mut dual_res = 0.0;
        for i in 0..s_new.len() {
            let pr = s_new.as_slice()[i] - wt.as_slice()[i];
            dual.as_mut_slice()[i] += pr;
            primal += pr * pr;
            let dr = s_new.as_slice()[i] - s.as_slice()[i];
            dual_res += dr * dr;
        }
        s = s_new;
        let res = primal.sqrt().max(dual_res.sqrt());
        let init = *initial_res.get_or_insert(res.max(f64::MIN_POSITIVE));
        if res > 1e6 * init {
            return Err(ProxError::Diverged);
        }
        if res < settings.tol {
            break;
        }
    }
    let mut out = idwt(&s, levels)?;
    for v in out.as_mut_slice() {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Objective `1/2||α - a||² + λ r(α)` of the prox subproblem, used by the
/// solvers to pick the best feasible candidate.
pub fn prox_objective(alpha: &Image, a: &Image, lambda: f64, reg: &Regularizer) -> f64 {
    let dist: f64 =
        alpha.as_slice().iter().zip(a.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    0.5 * dist + lambda * reg.value(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn soft_threshold_definition() {
        let out = soft_threshold(&[3.0, -0.5, -3.0], 1.0).unwrap();
        assert_eq!(out, vec![2.0, 0.0, -2.0]);
        let id = soft_threshold(&[1.5, -0.25], 0.0).unwrap();
        assert_eq!(id, vec![1.5, -0.25]);
        assert!(soft_threshold(&[1.0], -0.1).is_err());
    }

    #[test]
    fn nonneg_projection() {
        assert_eq!(project_nonneg(&[-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn tv_prox_vanishing_penalty_returns_projection() {
        let a = Image::from_vec(4, vec![
            0.5, -0.2, 0.3, 0.9, -0.4, 0.1, 0.0, 0.6, 0.2, 0.8, -0.1, 0.4, 0.3, 0.2, 0.5, -0.7,
        ]);
        let settings = ProxSettings { max_iters: 50, ..Default::default() };
        let out = prox_tv(&a, 1e-12, &settings, None).unwrap();
        for (o, &av) in out.as_slice().iter().zip(a.as_slice()) {
            assert!((o - av.max(0.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn tv_prox_constant_image_unchanged() {
        let a = Image::from_vec(6, vec![0.7; 36]);
        let settings = ProxSettings { max_iters: 60, ..Default::default() };
        let out = prox_tv(&a, 0.4, &settings, None).unwrap();
        for v in out.as_slice() {
            assert_relative_eq!(*v, 0.7, max_relative = 1e-10);
        }
        assert!(prox_tv(&a, 0.0, &settings, None).is_err());
    }

    #[test]
    fn tv_prox_output_feasible_and_improves_objective() {
        let mut vals = vec![0.0; 64];
        let mut seed = 7u64;
        for v in &mut vals {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.3;
        }
        let a = Image::from_vec(8, vals);
        let lambda = 0.3;
        let settings = ProxSettings { max_iters: 200, ..Default::default() };
        let out = prox_tv(&a, lambda, &settings, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| v >= 0.0));
        let reg = Regularizer::Tv { weight: 1.0 };
        let obj_out = prox_objective(&out, &a, lambda, &reg);
        let competitor = Image::from_vec(8, project_nonneg(a.as_slice()));
        let obj_comp = prox_objective(&competitor, &a, lambda, &reg);
        assert!(obj_out <= obj_comp);
    }

    #[test]
    fn haar_round_trip_and_parseval() {
        let mut vals = vec![0.0; 256];
        let mut seed = 11u64;
        for v in &mut vals {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
        let img = Image::from_vec(16, vals);
        for levels in 1..=4 {
            let c = dwt(&img, levels).unwrap();
            let back = idwt(&c, levels).unwrap();
            for (x, y) in img.as_slice().iter().zip(back.as_slice()) {
                assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-12);
            }
            assert_relative_eq!(img.norm(), c.norm(), max_relative = 1e-12);
        }
        assert!(dwt(&img, 5).is_err());
    }

    #[test]
    fn haar_constant_block_single_coefficient() {
        let img = Image::from_vec(2, vec![0.8; 4]);
        let c = dwt(&img, 1).unwrap();
        assert_relative_eq!(c.as_slice()[0], 1.6, max_relative = 1e-14);
        assert!(c.as_slice()[1].abs() < 1e-15);
        assert!(c.as_slice()[2].abs() < 1e-15);
        assert!(c.as_slice()[3].abs() < 1e-15);
    }

    #[test]
    fn admm_vanishing_penalty_returns_projection() {
        let a = Image::from_vec(8, (0..64).map(|i| ((i % 9) as f64 - 4.0) / 5.0).collect());
        let settings = ProxSettings { max_iters: 80, ..Default::default() };
        let out = prox_wavelet_admm(&a, 1e-12, 2, &settings).unwrap();
        for (o, &av) in out.as_slice().iter().zip(a.as_slice()) {
            assert!((o - av.max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn admm_large_threshold_zeroes_signal() {
        let a = Image::from_vec(8, (0..64).map(|i| (i % 5) as f64 / 10.0).collect());
        // λ above ||Ψᵀ(a)_+||_∞ forces every coefficient to zero.
        let wt = dwt(&Image::from_vec(8, project_nonneg(a.as_slice())), 2).unwrap();
        let lam = 2.0 * wt.as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let settings = ProxSettings { max_iters: 300, ..Default::default() };
        let out = prox_wavelet_admm(&a, lam, 2, &settings).unwrap();
        let norm = out.norm();
        assert!(norm < 1e-3, "norm = {norm}");
    }

    #[test]
    fn admm_output_feasible() {
        let a = Image::from_vec(8, (0..64).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect());
        let settings = ProxSettings { max_iters: 100, ..Default::default() };
        let out = prox_wavelet_admm(&a, 0.5, 3, &settings).unwrap();
        assert!(out.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn prox_nonexpansive_on_random_pairs() {
        let settings = ProxSettings { max_iters: 300, ..Default::default() };
        let mut seed = 3u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.4
        };
        for _ in 0..5 {
            let a = Image::from_vec(8, (0..64).map(|_| rnd()).collect());
            let b = Image::from_vec(8, (0..64).map(|_| rnd()).collect());
            let dist_in: f64 =
                a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            for lam in [0.05, 0.4] {
                let pa = prox_tv(&a, lam, &settings, None).unwrap();
                let pb = prox_tv(&b, lam, &settings, None).unwrap();
                let dist_out: f64 = pa
                    .as_slice()
                    .iter()
                    .zip(pb.as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist_out <= dist_in + 1e-8, "tv: {dist_out} > {dist_in}");
                let wa = prox_wavelet_admm(&a, lam, 2, &settings).unwrap();
                let wb = prox_wavelet_admm(&b, lam, 2, &settings).unwrap();
                let dist_w: f64 = wa
                    .as_slice()
                    .iter()
                    .zip(wb.as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist_w <= dist_in + 1e-8, "wavelet: {dist_w} > {dist_in}");
            }
        }
    }
}
