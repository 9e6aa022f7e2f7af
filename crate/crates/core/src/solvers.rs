//! Block coordinate-descent reconstruction drivers.
//!
//! Outer iteration `i` alternates
//! 1. one Nesterov-accelerated proximal-gradient (NPG) step on the density
//!    map with the spectrum fixed, with adaptive step size backtracked until
//!    the majorization condition holds plus function restart, and
//! 2. a box-constrained limited-memory BFGS descent on the spectrum
//!    coefficients with the density map fixed, warm started at the previous
//!    coefficients.
//!
//! The PG variant drops the momentum term and is monotone in the penalized
//! objective; the known-spectrum variant skips step 2.

use thiserror::Error;

use crate::model::{nll_from_outputs, ForwardModel, ModelError, NoiseModel};
use crate::projector::{fbp, FanBeamGeometry, FbpFilter, ProjectorError, SystemMatrix};
use crate::prox::{
    project_nonneg, prox_tv, prox_wavelet_admm, ProxError, ProxSettings, Regularizer, TvDual,
};
use crate::spectrum::KnotGrid;
use crate::{dot, norm2, Image};

#[derive(Error, Debug)]
pub enum SolverError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("step size underflow: backtracking exceeded {0} halvings")]
    StepSizeUnderflow(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

type Result<T> = std::result::Result<T, SolverError>;

/// Outer-loop tuning constants. Defaults are the reference values
/// `(ε, η_α, η_I, n_sub) = (1e-6, 1e-3, 1e-2, 20)` with step adaptation
/// `(n, ξ) = (4, 0.5)` and at most 4000 outer iterations.
#[derive(Debug, Clone)]
pub struct OuterConfig {
    pub eps: f64,
    pub eta_alpha: f64,
    pub eta_coeffs: f64,
    pub n_sub: usize,
    pub max_outer: usize,
    pub adapt_n: usize,
    pub adapt_xi: f64,
    pub noise: NoiseModel,
    /// Density-map regularizer; `None` means nonnegativity projection only.
    pub reg: Option<Regularizer>,
    pub max_backtracks: usize,
}

impl OuterConfig {
    pub fn new(noise: NoiseModel, reg: Option<Regularizer>) -> Self {
        OuterConfig {
            eps: 1e-6,
            eta_alpha: 1e-3,
            eta_coeffs: 1e-2,
            n_sub: 20,
            max_outer: 4000,
            adapt_n: 4,
            adapt_xi: 0.5,
            noise,
            reg,
            max_backtracks: 60,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.eps > 0.0
            && self.eta_alpha > 0.0
            && self.eta_alpha < 1.0
            && self.eta_coeffs > 0.0
            && self.eta_coeffs < 1.0
            && self.n_sub >= 1
            && self.max_outer >= 1
            && self.adapt_xi > 0.0
            && self.adapt_xi < 1.0;
        if !ok {
            return Err(SolverError::InvalidState("outer config out of range".into()));
        }
        if let Some(reg) = &self.reg {
            if !(reg.weight() > 0.0) {
                return Err(SolverError::InvalidState("regularization weight must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn reg_weight(&self) -> f64 {
        self.reg.as_ref().map_or(0.0, |r| r.weight())
    }
}

/// NPG iteration state for the density-map block.
#[derive(Debug, Clone)]
pub struct NpgState {
    pub alpha_curr: Image,
    pub alpha_prev: Image,
    pub theta: f64,
    pub beta: f64,
    pub no_reduction_streak: usize,
    pub objective_last: f64,
}

/// How the solver finished.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIters,
    Error(String),
}

/// Per-outer-iteration trace columns.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    pub objective: Vec<f64>,
    pub nll: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta_nll: Vec<f64>,
    /// NaN where no ground truth was supplied.
    pub rse: Vec<f64>,
}

impl IterationTrace {
    fn push(&mut self, objective: f64, nll: f64, beta: f64, delta: f64, delta_nll: f64, rse: f64) {
        self.objective.push(objective);
        self.nll.push(nll);
        self.beta.push(beta);
        self.delta.push(delta);
        self.delta_nll.push(delta_nll);
        self.rse.push(rse);
    }

    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }
}

/// Solver output: estimates plus the audit trail.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub alpha_hat: Image,
    pub coeffs_hat: Vec<f64>,
    pub trace: IterationTrace,
    pub termination: Termination,
}

/// Snapshot of an accepted NPG step, for post-hoc majorization audits.
pub struct StepAudit<'a> {
    pub beta: f64,
    pub alpha_bar: &'a Image,
    pub grad_bar: &'a [f64],
    pub nll_bar: f64,
    pub alpha_new: &'a Image,
    pub nll_new: f64,
    pub restarted: bool,
    pub backtracks: usize,
}

type Observer<'o> = Option<&'o mut dyn FnMut(&StepAudit)>;

/// Smooth part of the objective (the NLL) as seen by the NPG step.
pub trait SmoothObjective {
    fn value(&self, alpha: &Image) -> Result<f64>;
    fn value_grad(&self, alpha: &Image) -> Result<(f64, Vec<f64>)>;
}

/// Polychromatic NLL with the spectrum block fixed.
struct PolyNll<'a> {
    model: ForwardModel<'a>,
    e: &'a [f64],
    coeffs: Vec<f64>,
    noise: NoiseModel,
}

impl SmoothObjective for PolyNll<'_> {
    fn value(&self, alpha: &Image) -> Result<f64> {
        let state = self.model.state(alpha)?;
        Ok(state.nll(self.e, &self.coeffs, self.noise)?)
    }

    fn value_grad(&self, alpha: &Image) -> Result<(f64, Vec<f64>)> {
        let state = self.model.state(alpha)?;
        let v = state.nll(self.e, &self.coeffs, self.noise)?;
        let g = state.grad_alpha(self.model.phi, self.e, &self.coeffs, self.noise)?;
        Ok((v, g))
    }
}

/// `1/2 ||y - Φα||²` for the linearized BPDN baseline.
pub struct QuadraticNll<'a> {
    pub phi: &'a SystemMatrix,
    pub y: &'a [f64],
}

impl SmoothObjective for QuadraticNll<'_> {
    fn value(&self, alpha: &Image) -> Result<f64> {
        let r = self.phi.project(alpha.as_slice())?;
        Ok(0.5 * r.iter().zip(self.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn value_grad(&self, alpha: &Image) -> Result<(f64, Vec<f64>)> {
        let mut r = self.phi.project(alpha.as_slice())?;
        let v = 0.5 * r.iter().zip(self.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for (ri, yi) in r.iter_mut().zip(self.y) {
            *ri -= yi;
        }
        Ok((v, self.phi.backproject(&r)?))
    }
}

/// Barzilai-Borwein initial step size from a unit-norm probe:
/// `β0 = ⟨Δα, Δg⟩ / ⟨Δg, Δg⟩`, falling back to 1 when degenerate.
pub fn bb_init<F>(alpha0: &Image, grad_fn: F) -> Result<f64>
where
    F: Fn(&Image) -> Result<Vec<f64>>,
{
    let g0 = grad_fn(alpha0)?;
    if g0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidState("non-finite gradient at the initial point".into()));
    }
    let n = g0.len() as f64;
    let gnorm = norm2(&g0);
    let dir: Vec<f64> = if gnorm > 0.0 {
        g0.iter().map(|v| -v / gnorm).collect()
    } else {
        vec![1.0 / n.sqrt(); g0.len()]
    };
    let mut probe = alpha0.clone();
    for (p, d) in probe.as_mut_slice().iter_mut().zip(&dir) {
        *p += d;
    }
    let g1 = grad_fn(&probe)?;
    if g1.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidState("non-finite gradient at the probe point".into()));
    }
    let dg: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
    let denom = dot(&dg, &dg);
    let beta = dot(&dir, &dg) / denom;
    if beta.is_finite() && beta > 0.0 {
        Ok(beta)
    } else {
        Ok(1.0)
    }
}

/// Proximal operator dispatch with warm-started TV duals.
struct ProxOperator<'a> {
    reg: Option<&'a Regularizer>,
    tv_warm: TvDual,
    n_sub: usize,
    tol: f64,
}

impl<'a> ProxOperator<'a> {
    fn new(reg: Option<&'a Regularizer>, n_sub: usize) -> Self {
        ProxOperator { reg, tv_warm: TvDual::default(), n_sub, tol: 0.0 }
    }

    fn apply(&mut self, a: &Image, lambda: f64) -> Result<Image> {
        match self.reg {
            None => Ok(Image::from_vec(a.side(), project_nonneg(a.as_slice()))),
            Some(Regularizer::Tv { .. }) => {
                let settings = ProxSettings { rho: 1.0, tol: self.tol, max_iters: self.n_sub };
                Ok(prox_tv(a, lambda, &settings, Some(&mut self.tv_warm))?)
            }
            Some(Regularizer::WaveletL1 { levels, .. }) => {
                let settings = ProxSettings { rho: 1.0, tol: self.tol, max_iters: self.n_sub };
                Ok(prox_wavelet_admm(a, lambda, *levels, &settings)?)
            }
        }
    }

    fn reg_value(&self, alpha: &Image) -> f64 {
        self.reg.map_or(0.0, |r| r.value(alpha))
    }
}

struct StepOutcome {
    nll_new: f64,
    objective_new: f64,
    backtracked: bool,
}

/// One NPG (or PG) step on the density map. Mutates `state` in place.
#[allow(clippy::too_many_arguments)]
fn npg_step(
    state: &mut NpgState,
    smooth: &dyn SmoothObjective,
    prox: &mut ProxOperator,
    u: f64,
    momentum: bool,
    config: &OuterConfig,
    observer: &mut Observer,
) -> Result<StepOutcome> {
    let xi = config.adapt_xi;
    // Adaptation: after `adapt_n` outer iterations without a reduction, probe
    // a larger step to track the local Lipschitz constant.
    if state.no_reduction_streak >= config.adapt_n {
        state.beta /= xi;
        state.no_reduction_streak = 0;
    }

    let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * state.theta * state.theta).sqrt());
    let mut restarted = false;
    let mut use_momentum = momentum;
    let mut total_backtracks = 0usize;

    loop {
        let mom = if use_momentum { (state.theta - 1.0) / theta_next } else { 0.0 };
        let mut alpha_bar = state.alpha_curr.clone();
        if mom != 0.0 {
            for ((b, &c), &p) in alpha_bar
                .as_mut_slice()
                .iter_mut()
                .zip(state.alpha_curr.as_slice())
                .zip(state.alpha_prev.as_slice())
            {
                *b = c + mom * (c - p);
            }
        }
        let (nll_bar, grad) = smooth.value_grad(&alpha_bar)?;
        if !nll_bar.is_finite() {
            return Err(SolverError::InvalidState("NLL not finite at extrapolated point".into()));
        }

        let mut backtracks = 0usize;
        let (candidate, nll_cand) = loop {
            let mut target = alpha_bar.clone();
            for (t, g) in target.as_mut_slice().iter_mut().zip(&grad) {
                *t -= state.beta * g;
            }
            let cand = prox.apply(&target, state.beta * u)?;
            let nll_cand = smooth.value(&cand)?;
            // Majorization: L(α) ≤ L(ᾱ) + (α-ᾱ)ᵀ∇L(ᾱ) + ||α-ᾱ||²/(2β).
            let mut lin = 0.0;
            let mut sq = 0.0;
            for ((&cv, &bv), &gv) in cand.as_slice().iter().zip(alpha_bar.as_slice()).zip(&grad) {
                let d = cv - bv;
                lin += d * gv;
                sq += d * d;
            }
            let rhs = nll_bar + lin + sq / (2.0 * state.beta);
            let slack = 1e-10 * (nll_bar.abs() + nll_cand.abs()) + 1e-300;
            if nll_cand.is_finite() && nll_cand <= rhs + slack {
                break (cand, nll_cand);
            }
            state.beta *= xi;
            backtracks += 1;
            if backtracks > config.max_backtracks {
                return Err(SolverError::StepSizeUnderflow(config.max_backtracks));
            }
        };
        total_backtracks += backtracks;

        let objective_cand = nll_cand + u * prox.reg_value(&candidate);
        if objective_cand > state.objective_last && use_momentum && mom != 0.0 {
            // Function restart: discard the extrapolated point and redo the
            // step from the previous accepted iterate with θ reset.
            restarted = true;
            use_momentum = false;
            continue;
        }

        let (alpha_new, nll_new, objective_new) =
            if objective_cand > state.objective_last && !use_momentum {
                // Inexact prox failed to descend; hold the iterate.
                let nll_curr = smooth.value(&state.alpha_curr)?;
                (state.alpha_curr.clone(), nll_curr, state.objective_last)
            } else {
                (candidate, nll_cand, objective_cand)
            };

        if let Some(obs) = observer {
            obs(&StepAudit {
                beta: state.beta,
                alpha_bar: &alpha_bar,
                grad_bar: &grad,
                nll_bar,
                alpha_new: &alpha_new,
                nll_new,
                restarted,
                backtracks: total_backtracks,
            });
        }

        state.theta = if restarted { 1.0 } else { theta_next };
        state.alpha_prev = std::mem::replace(&mut state.alpha_curr, alpha_new);
        state.objective_last = objective_new;
        if total_backtracks == 0 {
            state.no_reduction_streak += 1;
        } else {
            state.no_reduction_streak = 0;
        }
        return Ok(StepOutcome { nll_new, objective_new, backtracked: total_backtracks > 0 });
    }
}

/// Projected limited-memory BFGS over the nonnegative orthant (memory 10,
/// Armijo line search along the projected arc). Returns the minimizer and
/// its objective value; `f` is nonincreasing across accepted steps.
pub fn lbfgsb_minimize<F>(
    f_and_grad: F,
    x0: &[f64],
    stop_tol_abs: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 10;
    let mut x = project_nonneg(x0);
    let (mut fx, mut g) = f_and_grad(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidState("non-finite objective or gradient".into()));
    }
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, 1/sᵀy)
    let mut gamma = initial_curvature(&x, &g, &f_and_grad)?;

    for _ in 0..max_iters {
        // Free-variable set: at the bound with inward-pointing gradient.
        let active: Vec<bool> = x.iter().zip(&g).map(|(&xi, &gi)| xi <= 0.0 && gi > 0.0).collect();
        let mut q: Vec<f64> = g.iter().zip(&active).map(|(&gi, &a)| if a { 0.0 } else { gi }).collect();
        // Two-loop recursion on the free subspace.
        let mut alphas = vec![0.0; pairs.len()];
        for (idx, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alphas[idx] = a;
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
        }
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for (idx, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &q);
            let a = alphas[idx];
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for (qi, &a) in q.iter_mut().zip(&active) {
            if a {
                *qi = 0.0;
            }
        }
        // q is now H·g restricted to free variables; descend along -q.
        let mut accepted = None;
        for dir_try in 0..2 {
            let dir: Vec<f64> = if dir_try == 0 {
                q.iter().map(|v| -v).collect()
            } else {
                g.iter().zip(&active).map(|(&gi, &a)| if a { 0.0 } else { -gi }).collect()
            };
            if dir.iter().all(|&d| d == 0.0) {
                continue;
            }
            let mut t = 1.0;
            for _ in 0..40 {
                let cand: Vec<f64> =
                    x.iter().zip(&dir).map(|(&xi, &di)| (xi + t * di).max(0.0)).collect();
                let moved: f64 =
                    cand.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                if moved == 0.0 {
                    break;
                }
                if let Ok((fc, gc)) = f_and_grad(&cand) {
                    let decrease: f64 =
                        g.iter().zip(&cand).zip(&x).map(|((&gi, &c), &xi)| gi * (c - xi)).sum();
                    if fc.is_finite() && fc <= fx + 1e-4 * decrease {
                        accepted = Some((cand, fc, gc, t));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((x_new, f_new, g_new, _)) = accepted else {
            break; // no descent available: projected stationary point
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm2(&s) * norm2(&yv) {
            gamma = sy / dot(&yv, &yv);
            pairs.push((s, yv, 1.0 / sy));
            if pairs.len() > MEMORY {
                pairs.remove(0);
            }
        }
        let df = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        if df < stop_tol_abs {
            break;
        }
    }
    Ok((x, fx))
}

/// Scale-covariant initial inverse-curvature estimate from a secant probe
/// along the current point (falls back to a gradient-direction probe at the
/// origin).
fn initial_curvature<F>(x: &[f64], g: &[f64], f_and_grad: &F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let xnorm = norm2(x);
    let dir: Vec<f64> = if xnorm > 0.0 {
        let scale = 1e-3;
        x.iter().map(|&v| v * scale).collect()
    } else {
        let gn = norm2(g);
        if gn == 0.0 {
            return Ok(1.0);
        }
        g.iter().map(|&v| -1e-3 * v / gn).collect()
    };
    let probe: Vec<f64> = x.iter().zip(&dir).map(|(&a, &d)| (a + d).max(0.0)).collect();
    let (_, gp) = f_and_grad(&probe)?;
    let ds: Vec<f64> = probe.iter().zip(x).map(|(a, b)| a - b).collect();
    let dg: Vec<f64> = gp.iter().zip(g).map(|(a, b)| a - b).collect();
    let denom = dot(&dg, &dg);
    let gamma = dot(&ds, &dg) / denom;
    if gamma.is_finite() && gamma > 0.0 {
        Ok(gamma)
    } else {
        Ok(1.0)
    }
}

/// Which density/spectrum update scheme to run.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverVariant {
    /// Blind: accelerated density step + BFGS spectrum step.
    NpgBfgs,
    /// Blind without momentum; objective is monotone.
    PgBfgs,
    /// Known spectrum: accelerated density step only.
    NpgKnownSpectrum { coeffs: Vec<f64> },
}

/// Block coordinate-descent reconstruction.
pub struct BlockSolver<'a> {
    pub e: &'a [f64],
    pub phi: &'a SystemMatrix,
    pub grid: &'a KnotGrid,
    pub geom: &'a FanBeamGeometry,
    pub config: OuterConfig,
    pub alpha_init: Option<Image>,
    pub coeffs_init: Option<Vec<f64>>,
    pub truth: Option<&'a Image>,
}

impl<'a> BlockSolver<'a> {
    pub fn new(
        e: &'a [f64],
        phi: &'a SystemMatrix,
        grid: &'a KnotGrid,
        geom: &'a FanBeamGeometry,
        config: OuterConfig,
    ) -> Self {
        BlockSolver { e, phi, grid, geom, config, alpha_init: None, coeffs_init: None, truth: None }
    }

    pub fn with_alpha_init(mut self, alpha: Image) -> Self {
        self.alpha_init = Some(alpha);
        self
    }

    pub fn with_coeffs_init(mut self, coeffs: Vec<f64>) -> Self {
        self.coeffs_init = Some(coeffs);
        self
    }

    pub fn with_truth(mut self, truth: &'a Image) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn run(&self, variant: SolverVariant) -> Result<ReconResult> {
        self.run_observed(variant, &mut None)
    }

    /// Runs the solver, reporting every accepted density step to `observer`.
    pub fn run_observed(&self, variant: SolverVariant, observer: &mut Observer) -> Result<ReconResult> {
        self.config.validate()?;
        if self.e.len() != self.phi.nrows() {
            return Err(SolverError::InvalidState(format!(
                "expected {} measurements, got {}",
                self.phi.nrows(),
                self.e.len()
            )));
        }
        if self.e.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(SolverError::InvalidState("measurements must be positive".into()));
        }
        let momentum = !matches!(variant, SolverVariant::PgBfgs);
        let blind = !matches!(variant, SolverVariant::NpgKnownSpectrum { .. });
        let j_count = self.grid.spline_count();

        // Initialization: α⁰ = α⁻¹ = FBP(-ln E), θ⁰ = 0, and a center-spike
        // spectrum matching the largest measurement (approximately the
        // monochromatic model).
        let alpha0 = match &self.alpha_init {
            Some(a) => a.clone(),
            None => {
                let y: Vec<f64> = self.e.iter().map(|&v| -v.ln()).collect();
                fbp(&y, self.geom, FbpFilter::Hann)?
            }
        };
        let mut coeffs: Vec<f64> = match (&variant, &self.coeffs_init) {
            (SolverVariant::NpgKnownSpectrum { coeffs }, _) => coeffs.clone(),
            (_, Some(init)) => init.clone(),
            _ => {
                let center = self.grid.center_index();
                let knots = self.grid.knots();
                let area = (knots[center + 1] - knots[center - 1]) / 2.0;
                let peak = self.e.iter().cloned().fold(f64::MIN, f64::max);
                let mut c = vec![0.0; j_count];
                c[center - 1] = peak / area;
                c
            }
        };
        if coeffs.len() != j_count || coeffs.iter().all(|&c| c == 0.0) {
            return Err(SolverError::Model(ModelError::DegenerateSpectrum));
        }

        let u = self.config.reg_weight();
        let mut prox = ProxOperator::new(self.config.reg.as_ref(), self.config.n_sub);
        let model = ForwardModel::new(self.phi, self.grid);
        let mut trace = IterationTrace::default();

        let make_smooth = |c: &[f64]| PolyNll {
            model: ForwardModel::new(self.phi, self.grid),
            e: self.e,
            coeffs: c.to_vec(),
            noise: self.config.noise,
        };

        // β⁰ by the Barzilai-Borwein probe at the initial point.
        let smooth0 = make_smooth(&coeffs);
        let beta0 = bb_init(&alpha0, |a| Ok(smooth0.value_grad(a)?.1))?;
        let nll0 = smooth0.value(&alpha0)?;
        if !nll0.is_finite() {
            return Ok(ReconResult {
                alpha_hat: alpha0,
                coeffs_hat: coeffs,
                trace,
                termination: Termination::Error("NLL not finite at the initial point".into()),
            });
        }
        // The objective includes the nonnegativity indicator, so an
        // infeasible initial point (FBP images carry negatives) starts at
        // +∞ and the first proximal step always counts as a descent.
        let obj0 = if alpha0.as_slice().iter().any(|&v| v < 0.0) {
            f64::INFINITY
        } else {
            nll0 + u * prox.reg_value(&alpha0)
        };
        let mut state = NpgState {
            alpha_prev: alpha0.clone(),
            alpha_curr: alpha0,
            theta: 0.0,
            beta: beta0,
            no_reduction_streak: 0,
            objective_last: obj0,
        };

        let mut nll_last = nll0; // L(α^{i-1}, I^{i-1})
        let mut termination = Termination::MaxIters;
        prox.tol = 0.0; // first inner prox runs to its iteration cap

        for outer in 1..=self.config.max_outer {
            let smooth = make_smooth(&coeffs);
            let outcome =
                match npg_step(&mut state, &smooth, &mut prox, u, momentum, &self.config, observer) {
                    Ok(o) => o,
                    Err(SolverError::StepSizeUnderflow(n)) => {
                        termination = Termination::Error(format!(
                            "step size underflow after {n} backtracking halvings"
                        ));
                        break;
                    }
                    Err(e) => return Err(e),
                };
            let _ = outcome.backtracked;

            let delta: f64 = state
                .alpha_curr
                .as_slice()
                .iter()
                .zip(state.alpha_prev.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let delta_nll = (outcome.nll_new - nll_last).abs();

            // Step 2: spectrum update with cached A at the new iterate.
            let mut nll_after = outcome.nll_new;
            if blind {
                let spec_state = model.state(&state.alpha_curr)?;
                let e = self.e;
                let noise = self.config.noise;
                let f = |c: &[f64]| -> Result<(f64, Vec<f64>)> {
                    if c.iter().all(|&v| v == 0.0) {
                        return Ok((f64::INFINITY, vec![0.0; c.len()]));
                    }
                    let out = spec_state.intensities(c)?;
                    let v = nll_from_outputs(e, &out, noise);
                    let g = spec_state.grad_coeffs(e, c, noise)?;
                    Ok((v, g))
                };
                // First pass bootstraps the tolerance from the NLL magnitude.
                let tol = if outer == 1 {
                    1e-10 * outcome.nll_new.abs()
                } else {
                    self.config.eta_coeffs * delta_nll
                };
                let (c_new, f_new) = lbfgsb_minimize(f, &coeffs, tol, self.config.n_sub)?;
                coeffs = c_new;
                nll_after = f_new;
            }
            nll_last = nll_after;
            let objective = nll_after + u * prox.reg_value(&state.alpha_curr);
            state.objective_last = objective;

            let rse = self
                .truth
                .map(|t| crate::pipeline::rse(state.alpha_curr.as_slice(), t.as_slice()).unwrap_or(f64::NAN))
                .unwrap_or(f64::NAN);
            trace.push(objective, nll_after, state.beta, delta, delta_nll, rse);

            // Inner prox tolerance for the next outer iteration.
            prox.tol = self.config.eta_alpha * delta;

            let anorm = state.alpha_curr.norm();
            if delta < self.config.eps * anorm {
                termination = Termination::Converged;
                break;
            }
            let _ = outer;
        }

        Ok(ReconResult {
            alpha_hat: state.alpha_curr,
            coeffs_hat: coeffs,
            trace,
            termination,
        })
    }
}

/// Largest eigenvalue of `ΦᵀΦ` by deterministic power iteration, for the
/// exact Lipschitz step of the quadratic baseline.
pub fn lipschitz_quadratic(phi: &SystemMatrix) -> Result<f64> {
    let p = phi.ncols();
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let av = phi.project(&v)?;
        let atav = phi.backproject(&av)?;
        let norm = norm2(&atav);
        if norm == 0.0 {
            return Ok(1.0);
        }
        lambda = dot(&v, &atav);
        for (vi, ai) in v.iter_mut().zip(&atav) {
            *vi = ai / norm;
        }
    }
    Ok(lambda.max(f64::MIN_POSITIVE))
}

/// Linearized BPDN baseline: `min 1/2||y - Φα||² + u r(α)` by the NPG
/// machinery with the exact Lipschitz step size.
pub fn lin_bpdn(
    y: &[f64],
    phi: &SystemMatrix,
    config: &OuterConfig,
    alpha_init: Image,
    truth: Option<&Image>,
) -> Result<ReconResult> {
    config.validate()?;
    if y.len() != phi.nrows() {
        return Err(SolverError::InvalidState("measurement length mismatch".into()));
    }
    let smooth = QuadraticNll { phi, y };
    let u = config.reg_weight();
    let mut prox = ProxOperator::new(config.reg.as_ref(), config.n_sub);
    let lip = lipschitz_quadratic(phi)?;
    let nll0 = smooth.value(&alpha_init)?;
    let mut state = NpgState {
        alpha_prev: alpha_init.clone(),
        alpha_curr: alpha_init,
        theta: 0.0,
        beta: 1.0 / lip,
        no_reduction_streak: 0,
        objective_last: f64::INFINITY,
    };
    state.objective_last = if state.alpha_curr.as_slice().iter().any(|&v| v < 0.0) {
        f64::INFINITY
    } else {
        nll0 + u * prox.reg_value(&state.alpha_curr)
    };
    let mut trace = IterationTrace::default();
    let mut termination = Termination::MaxIters;
    prox.tol = 0.0;
    let mut observer: Observer = None;
    for _ in 1..=config.max_outer {
        let outcome = match npg_step(&mut state, &smooth, &mut prox, u, true, config, &mut observer)
        {
            Ok(o) => o,
            Err(SolverError::StepSizeUnderflow(n)) => {
                termination =
                    Termination::Error(format!("step size underflow after {n} halvings"));
                break;
            }
            Err(e) => return Err(e),
        };
        let delta: f64 = state
            .alpha_curr
            .as_slice()
            .iter()
            .zip(state.alpha_prev.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rse = truth
            .map(|t| crate::pipeline::rse(state.alpha_curr.as_slice(), t.as_slice()).unwrap_or(f64::NAN))
            .unwrap_or(f64::NAN);
        trace.push(outcome.objective_new, outcome.nll_new, state.beta, delta, f64::NAN, rse);
        prox.tol = config.eta_alpha * delta;
        if delta < config.eps * state.alpha_curr.norm() {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(ReconResult {
        alpha_hat: state.alpha_curr,
        coeffs_hat: Vec::new(),
        trace,
        termination,
    })
}
