//! B1-spline expansion of the mass-attenuation spectrum.
//!
//! The spectrum `υ(κ)` is expanded as `υ(κ) = Σ_j I_j b_j(κ)` where the
//! `b_j` are hat functions on a growing geometric knot sequence
//! `κ_j = q^j κ_0`, `q > 1`. The Laplace transforms `b_j^L(s)` and their
//! `s`-derivatives have closed forms, which is what makes the reconstruction
//! model cheap to evaluate exactly.

use rayon::prelude::*;
use thiserror::Error;

use crate::Image;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("curve κ-range [{lo}, {hi}] exceeds knot coverage [{grid_lo}, {grid_hi}]")]
    Coverage { lo: f64, hi: f64, grid_lo: f64, grid_hi: f64 },
    #[error("invalid mass-attenuation curve: {0}")]
    InvalidCurve(String),
    #[error("shift requires a boundary zero coefficient ({0})")]
    ShiftUnavailable(String),
}

type Result<T> = std::result::Result<T, SpectrumError>;

/// Geometric knot sequence `κ_j = q^j κ_0` for `j = 0..=J+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    q: f64,
    kappa0: f64,
    j_count: usize,
    knots: Vec<f64>,
}

impl KnotGrid {
    /// Builds a grid from the common ratio, first knot, and interior spline
    /// count directly.
    pub fn new(q: f64, kappa0: f64, j_count: usize) -> Result<Self> {
        if !(q > 1.0) || !q.is_finite() {
            return Err(SpectrumError::InvalidArgument(format!("common ratio q must be > 1, got {q}")));
        }
        if !(kappa0 > 0.0) || !kappa0.is_finite() {
            return Err(SpectrumError::InvalidArgument(format!("first knot must be > 0, got {kappa0}")));
        }
        if j_count < 1 {
            return Err(SpectrumError::InvalidArgument("spline count J must be >= 1".into()));
        }
        let knots = (0..=j_count + 1).map(|j| q.powi(j as i32) * kappa0).collect();
        Ok(KnotGrid { q, kappa0, j_count, knots })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    /// Number of interior splines J.
    pub fn spline_count(&self) -> usize {
        self.j_count
    }

    /// Knot positions, `J + 2` of them (indices `0..=J+1`).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot index `⌈(J+1)/2⌉` at which the initial spectrum spike is placed.
    pub fn center_index(&self) -> usize {
        (self.j_count + 2) / 2
    }

    /// Support of the `j`th hat, 1-based: `[κ_{j-1}, κ_j, κ_{j+1}]`.
    fn hat(&self, j: usize) -> (f64, f64, f64) {
        (self.knots[j - 1], self.knots[j], self.knots[j + 1])
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j < 1 || j > self.j_count {
            return Err(SpectrumError::InvalidArgument(format!(
                "spline index {j} out of range 1..={}",
                self.j_count
            )));
        }
        Ok(())
    }
}

/// Builds knots with total coverage `κ_{J}/κ_0 ... = coverage` via
/// `q^J = coverage`, centered so that `κ_{⌈(J+1)/2⌉} = center_value`.
pub fn build_knots(coverage: f64, center_value: f64, j_count: usize) -> Result<KnotGrid> {
    if !(coverage > 1.0) || !coverage.is_finite() {
        return Err(SpectrumError::InvalidArgument(format!("coverage must be > 1, got {coverage}")));
    }
    if !(center_value > 0.0) || !center_value.is_finite() {
        return Err(SpectrumError::InvalidArgument(format!(
            "center value must be > 0, got {center_value}"
        )));
    }
    if j_count < 1 {
        return Err(SpectrumError::InvalidArgument("J must be >= 1".into()));
    }
    let q = coverage.powf(1.0 / j_count as f64);
    let center = (j_count + 2) / 2; // ceil((J+1)/2)
    let kappa0 = center_value / q.powi(center as i32);
    KnotGrid::new(q, kappa0, j_count)
}

/// Mass-attenuation spectrum: nonnegative B1 coefficients on a knot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MassAttenuationSpectrum {
    pub grid: KnotGrid,
    pub coeffs: Vec<f64>,
}

impl MassAttenuationSpectrum {
    pub fn new(grid: KnotGrid, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.spline_count() {
            return Err(SpectrumError::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                grid.spline_count(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(SpectrumError::InvalidArgument("coefficients must be nonnegative".into()));
        }
        Ok(MassAttenuationSpectrum { grid, coeffs })
    }

    /// Point evaluation `υ(κ) = Σ_j I_j b_j(κ)`.
    pub fn eval(&self, kappa: f64) -> f64 {
        let j_count = self.grid.spline_count();
        let mut acc = 0.0;
        for j in 1..=j_count {
            if self.coeffs[j - 1] != 0.0 {
                acc += self.coeffs[j - 1] * hat_eval(self.grid.hat(j), kappa);
            }
        }
        acc
    }

    /// Laplace transform `υ^L(s)` (derivative order `m` in `s`).
    pub fn laplace(&self, s: f64, m: usize) -> f64 {
        let mut acc = 0.0;
        for j in 1..=self.grid.spline_count() {
            let c = self.coeffs[j - 1];
            if c != 0.0 {
                acc += c * hat_laplace(self.grid.hat(j), s, m);
            }
        }
        acc
    }

    /// Incident energy `υ^L(0)`.
    pub fn incident_energy(&self) -> f64 {
        self.laplace(0.0, 0)
    }
}

/// Energy-domain incident spectrum as a sampled table `ι(ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpectrumTable {
    energies: Vec<f64>,
    densities: Vec<f64>,
}

impl EnergySpectrumTable {
    pub fn new(energies: Vec<f64>, densities: Vec<f64>) -> Result<Self> {
        if energies.len() < 2 || energies.len() != densities.len() {
            return Err(SpectrumError::InvalidArgument(
                "energy table needs >= 2 matching samples".into(),
            ));
        }
        if energies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpectrumError::InvalidArgument("energies must be strictly increasing".into()));
        }
        if densities.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(SpectrumError::InvalidArgument("densities must be nonnegative".into()));
        }
        Ok(EnergySpectrumTable { energies, densities })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn support(&self) -> (f64, f64) {
        (self.energies[0], *self.energies.last().unwrap())
    }

    /// Linear interpolation; zero outside the tabulated support.
    pub fn density_at(&self, energy: f64) -> f64 {
        let e = &self.energies;
        if energy < e[0] || energy > *e.last().unwrap() {
            return 0.0;
        }
        let idx = match e.binary_search_by(|p| p.partial_cmp(&energy).unwrap()) {
            Ok(i) => return self.densities[i],
            Err(i) => i,
        };
        let (e0, e1) = (e[idx - 1], e[idx]);
        let t = (energy - e0) / (e1 - e0);
        self.densities[idx - 1] * (1.0 - t) + self.densities[idx] * t
    }

    /// Total incident energy `∫ ι(ε) dε` by exact trapezoid on the table.
    pub fn total_energy(&self) -> f64 {
        self.energies
            .windows(2)
            .zip(self.densities.windows(2))
            .map(|(e, d)| 0.5 * (d[0] + d[1]) * (e[1] - e[0]))
            .sum()
    }

    /// Exact integral of the piecewise-linear table over `[e_a, e_b]`,
    /// clamped to the tabulated support.
    pub fn integral(&self, e_a: f64, e_b: f64) -> f64 {
        let (lo, hi) = self.support();
        let a = e_a.max(lo);
        let b = e_b.min(hi);
        if !(b > a) {
            return 0.0;
        }
        let mut acc = 0.0;
        let e = &self.energies;
        let start = match e.binary_search_by(|p| p.partial_cmp(&a).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let mut x0 = a;
        for i in start..e.len() - 1 {
            if e[i + 1] <= a {
                continue;
            }
            let x1 = e[i + 1].min(b);
            if x1 <= x0 {
                break;
            }
            acc += 0.5 * (self.density_at(x0) + self.density_at(x1)) * (x1 - x0);
            x0 = x1;
            if x0 >= b {
                break;
            }
        }
        acc
    }

    pub fn scaled(&self, c: f64) -> EnergySpectrumTable {
        EnergySpectrumTable {
            energies: self.energies.clone(),
            densities: self.densities.iter().map(|d| c * d).collect(),
        }
    }
}

/// One monotone branch of the mass-attenuation curve: strictly decreasing
/// `κ(ε)` samples over an energy interval between K-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSegment {
    energies: Vec<f64>,
    kappas: Vec<f64>,
    // Monotone cubic interpolant of the inverse map ε(κ) on ascending κ.
    inverse: MonotoneCubic,
    forward: MonotoneCubic,
}

impl CurveSegment {
    pub fn new(energies: Vec<f64>, kappas: Vec<f64>) -> Result<Self> {
        if energies.len() < 2 || energies.len() != kappas.len() {
            return Err(SpectrumError::InvalidCurve("segment needs >= 2 matching samples".into()));
        }
        if energies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpectrumError::InvalidCurve("segment energies must be strictly increasing".into()));
        }
        if kappas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(SpectrumError::InvalidCurve(
                "κ must be strictly decreasing in ε within a segment".into(),
            ));
        }
        if kappas.iter().any(|&k| !(k > 0.0)) {
            return Err(SpectrumError::InvalidCurve("κ samples must be positive".into()));
        }
        // ε(κ) on ascending κ: reverse the tables.
        let ka: Vec<f64> = kappas.iter().rev().copied().collect();
        let ea: Vec<f64> = energies.iter().rev().copied().collect();
        let inverse = MonotoneCubic::new(&ka, &ea)?;
        let forward = MonotoneCubic::new(&energies, &kappas)?;
        Ok(CurveSegment { energies, kappas, inverse, forward })
    }

    pub fn energy_interval(&self) -> (f64, f64) {
        (self.energies[0], *self.energies.last().unwrap())
    }

    /// κ-range `(u, v)` covered by this branch (u < v).
    pub fn kappa_range(&self) -> (f64, f64) {
        (*self.kappas.last().unwrap(), self.kappas[0])
    }

    pub fn kappa_at(&self, energy: f64) -> f64 {
        self.forward.eval(energy)
    }

    /// Inverse map ε(κ) and its derivative dε/dκ.
    pub fn energy_at(&self, kappa: f64) -> (f64, f64) {
        (self.inverse.eval(kappa), self.inverse.deriv(kappa))
    }

    fn first_step(&self) -> f64 {
        self.energies[1] - self.energies[0]
    }

    fn last_step(&self) -> f64 {
        let n = self.energies.len();
        self.energies[n - 1] - self.energies[n - 2]
    }
}

/// Piecewise-monotone mass-attenuation curve with K-edge breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MassAttenuationCurve {
    segments: Vec<CurveSegment>,
    breakpoints: Vec<f64>,
}

impl MassAttenuationCurve {
    pub fn new(segments: Vec<CurveSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(SpectrumError::InvalidCurve("curve needs at least one segment".into()));
        }
        for w in segments.windows(2) {
            let (_, hi) = w[0].energy_interval();
            let (lo_next, _) = w[1].energy_interval();
            if lo_next < hi - 1e-9 * hi.abs().max(1.0) {
                return Err(SpectrumError::InvalidCurve(
                    "segment energy intervals must be disjoint and ordered".into(),
                ));
            }
            // Sampled tables place the K-edge between adjacent rows, so a
            // gap up to the local sample spacing still counts as contiguous.
            let allowed = 1.5 * w[0].last_step().max(w[1].first_step());
            if lo_next - hi > allowed {
                return Err(SpectrumError::InvalidCurve(format!(
                    "gap {} between segments exceeds the sample spacing",
                    lo_next - hi
                )));
            }
        }
        let breakpoints = segments.windows(2).map(|w| w[1].energy_interval().0).collect();
        Ok(MassAttenuationCurve { segments, breakpoints })
    }

    pub fn segments(&self) -> &[CurveSegment] {
        &self.segments
    }

    /// K-edge energies between consecutive branches.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn energy_support(&self) -> (f64, f64) {
        (self.segments[0].energy_interval().0, self.segments.last().unwrap().energy_interval().1)
    }

    /// Union bound of the per-branch κ ranges.
    pub fn kappa_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &self.segments {
            let (u, v) = s.kappa_range();
            lo = lo.min(u);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// κ(ε) lookup across branches.
    pub fn kappa_at(&self, energy: f64) -> f64 {
        for s in &self.segments {
            let (lo, hi) = s.energy_interval();
            if energy >= lo && energy <= hi {
                return s.kappa_at(energy);
            }
        }
        // Outside the tabulated support; clamp to the nearest branch edge.
        let (lo, _) = self.energy_support();
        if energy < lo {
            self.segments[0].kappa_at(lo)
        } else {
            let s = self.segments.last().unwrap();
            s.kappa_at(s.energy_interval().1)
        }
    }

    /// Mass-attenuation spectrum density
    /// `υ(κ) = Σ_m 1_{(u_m,v_m)}(κ) ι(ε_m(κ)) |ε_m'(κ)|`.
    pub fn upsilon_at(&self, kappa: f64, table: &EnergySpectrumTable) -> f64 {
        let mut acc = 0.0;
        for s in &self.segments {
            let (u, v) = s.kappa_range();
            if kappa >= u && kappa <= v {
                let (e, de) = s.energy_at(kappa);
                acc += table.density_at(e) * de.abs();
            }
        }
        acc
    }

    /// Average of `υ` over the κ-cell `[k_lo, k_hi]`, computed exactly from
    /// the energy content of the cell's preimages:
    /// `∫_cell υ dκ = Σ_m ∫ ι(ε) dε` over `ε_m([k_lo,k_hi] ∩ (u_m,v_m))`.
    pub fn upsilon_cell_average(&self, k_lo: f64, k_hi: f64, table: &EnergySpectrumTable) -> f64 {
        let mut acc = 0.0;
        for s in &self.segments {
            let (u, v) = s.kappa_range();
            let lo = k_lo.max(u);
            let hi = k_hi.min(v);
            if hi > lo {
                // ε(κ) is decreasing, so the preimage is [ε(hi), ε(lo)].
                let (e1, _) = s.energy_at(hi);
                let (e2, _) = s.energy_at(lo);
                acc += table.integral(e1.min(e2), e1.max(e2));
            }
        }
        acc / (k_hi - k_lo)
    }
}

/// Index `j0` splitting the knot axis into monotone low/high regions for the
/// spectrum shape constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeConstraint {
    pub j0: usize,
}

impl ShapeConstraint {
    pub fn new(j0: usize, j_count: usize) -> Result<Self> {
        let min = (j_count + 2) / 2;
        if j0 < min || j0 > j_count {
            return Err(SpectrumError::InvalidArgument(format!(
                "j0 = {j0} outside [{min}, {j_count}]"
            )));
        }
        Ok(ShapeConstraint { j0 })
    }

    /// Smallest admissible `j0 = ⌈(J+1)/2⌉`.
    pub fn minimal(j_count: usize) -> Self {
        ShapeConstraint { j0: (j_count + 2) / 2 }
    }
}

/// Hat value for knots `(a, b, c)`; 1 at `b`, 0 outside `[a, c)`.
fn hat_eval((a, b, c): (f64, f64, f64), kappa: f64) -> f64 {
    if kappa >= a && kappa < b {
        (kappa - a) / (b - a)
    } else if kappa >= b && kappa < c {
        (c - kappa) / (c - b)
    } else {
        0.0
    }
}

/// B1 basis value `b_j(κ)`.
pub fn b1_eval(grid: &KnotGrid, j: usize, kappa: f64) -> Result<f64> {
    grid.check_index(j)?;
    Ok(hat_eval(grid.hat(j), kappa))
}

/// `d^m/ds^m b_j^L(s) = ∫ (-κ)^m b_j(κ) e^{-sκ} dκ` in closed form.
///
/// The public entry point requires `s >= 0` (the model's monochromatic
/// projections are nonnegative); intermediate solver iterates may produce
/// negative path sums, which the crate-internal [`hat_laplace`] accepts.
pub fn b1_laplace(grid: &KnotGrid, j: usize, s: f64, m: usize) -> Result<f64> {
    grid.check_index(j)?;
    if !(s >= 0.0) {
        return Err(SpectrumError::InvalidArgument(format!("s must be >= 0, got {s}")));
    }
    Ok(hat_laplace(grid.hat(j), s, m))
}

// Below `|s| * (c - a) < TAU_SWITCH` the exponential-difference closed form
// cancels catastrophically, so a Taylor expansion around the peak knot is
// used instead; at the switch point both paths agree to ~1e-14 relative.
const TAU_SWITCH: f64 = 1.0;
const SERIES_MAX_TERMS: usize = 48;

/// Laplace transform of the hat with knots `(a, b, c)`, differentiated `m`
/// times in `s`, valid for any finite `s` (negative included).
pub(crate) fn hat_laplace((a, b, c): (f64, f64, f64), s: f64, m: usize) -> f64 {
    let tau = s.abs() * (c - a);
    if tau < TAU_SWITCH {
        hat_laplace_series((a, b, c), s, m)
    } else {
        hat_laplace_closed((a, b, c), s, m)
    }
}

/// Precomputed per-hat coefficient tables for bulk Laplace evaluation.
///
/// For each hat `j` and derivative order `m`, the series branch needs the
/// shifted moments `S_t / t!` and the closed-form branch needs the
/// antiderivative derivative-stack values `P^{(r)}(x)` at the three knots.
/// Both are `s`-independent, and all hats in a row share the exponentials
/// `e^{-s κ_t}` of the common knot sequence.
pub(crate) struct HatTables {
    j_count: usize,
    orders: usize,
    /// `series[m][j][t] = (-1)^m S_{m,t} / t!`, Horner-ready in `-s`.
    series: Vec<Vec<Vec<f64>>>,
    /// `closed[m][j][endpoint 0..3][r] = ± P_piece^{(r)}(x)`, Horner-ready
    /// in `1/s`; endpoint 0/1 bound the up piece, 1/2 the down piece.
    closed: Vec<Vec<[Vec<f64>; 3]>>,
    /// Hat widths `κ_{j+1} - κ_{j-1}` for the branch switch.
    widths: Vec<f64>,
    knots: Vec<f64>,
}

impl HatTables {
    /// Tables for derivative orders `0..=max_order`.
    pub fn new(grid: &KnotGrid, max_order: usize) -> Self {
        let j_count = grid.spline_count();
        let orders = max_order + 1;
        let mut series = Vec::with_capacity(orders);
        let mut closed = Vec::with_capacity(orders);
        for m in 0..orders {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let mut series_m = Vec::with_capacity(j_count);
            let mut closed_m = Vec::with_capacity(j_count);
            for j in 1..=j_count {
                let (a, b, c) = grid.hat(j);
                let l = b - a;
                let r = c - b;
                // Series coefficients around the peak knot.
                let mut coeffs = Vec::with_capacity(SERIES_MAX_TERMS);
                let mut inv_fact = 1.0;
                for t in 0..SERIES_MAX_TERMS {
                    if t > 0 {
                        inv_fact /= t as f64;
                    }
                    let mut s_mt = 0.0;
                    for k in 0..=m {
                        s_mt += binomial(m, k)
                            * b.powi((m - k) as i32)
                            * hat_central_moment(l, r, k + t);
                    }
                    coeffs.push(sign * s_mt * inv_fact);
                }
                series_m.push(coeffs);
                // Closed-form derivative stacks at the three knots. The
                // antiderivative of P e^{-sκ} is -e^{-sκ} Σ_r P^{(r)}(κ)/s^{r+1},
                // and the definite integrals telescope into endpoint stacks:
                //   value = Σ_x e^{-s x} stack_x(1/s).
                let up = hat_piece_poly(m, 1.0 / l, -a / l);
                let dn = hat_piece_poly(m, -1.0 / r, c / r);
                let stack = |poly: &[f64], x: f64| -> Vec<f64> {
                    (0..poly.len())
                        .map(|rr| {
                            let mut dv = 0.0;
                            for i in rr..poly.len() {
                                let mut fall = 1.0;
                                for f in 0..rr {
                                    fall *= (i - f) as f64;
                                }
                                dv += poly[i] * fall * x.powi((i - rr) as i32);
                            }
                            dv
                        })
                        .collect()
                };
                let at_a = stack(&up, a);
                let mut at_b: Vec<f64> = stack(&dn, b);
                // shared endpoint: up contributes -stack, down contributes +stack
                for (o, v) in at_b.iter_mut().zip(stack(&up, b)) {
                    *o -= v;
                }
                let at_c: Vec<f64> = stack(&dn, c).iter().map(|v| -v).collect();
                let scale = |mut v: Vec<f64>| {
                    for val in v.iter_mut() {
                        *val *= sign;
                    }
                    v
                };
                closed_m.push([scale(at_a), scale(at_b), scale(at_c)]);
            }
            series.push(series_m);
            closed.push(closed_m);
        }
        let widths = (1..=j_count)
            .map(|j| {
                let (a, _, c) = grid.hat(j);
                c - a
            })
            .collect();
        HatTables { j_count, orders, series, closed, widths, knots: grid.knots().to_vec() }
    }

    pub fn j_count(&self) -> usize {
        self.j_count
    }

    /// Fills `exps[t] = e^{-s κ_t}`; scratch shared across orders.
    pub fn fill_exps(&self, s: f64, exps: &mut Vec<f64>) {
        exps.clear();
        exps.extend(self.knots.iter().map(|&k| (-s * k).exp()));
    }

    /// Evaluates all `J` transforms of order `m` at `s` into `out`.
    pub fn eval_row(&self, s: f64, m: usize, exps: &[f64], out: &mut [f64]) {
        debug_assert!(m < self.orders);
        debug_assert_eq!(out.len(), self.j_count);
        for j in 0..self.j_count {
            out[j] = if s.abs() * self.widths[j] < TAU_SWITCH {
                // Horner in (-s), then the shared peak exponential.
                let coeffs = &self.series[m][j];
                let mut acc = 0.0;
                for &c in coeffs.iter().rev() {
                    acc = acc * (-s) + c;
                }
                acc * exps[j + 1]
            } else {
                // Σ over the three knots of e^{-s κ} · Horner-in-(1/s).
                let inv_s = 1.0 / s;
                let stacks = &self.closed[m][j];
                let mut acc = 0.0;
                for (t, stack) in stacks.iter().enumerate() {
                    let mut h = 0.0;
                    for &d in stack.iter().rev() {
                        h = h * inv_s + d;
                    }
                    acc += exps[j + t] * h * inv_s;
                }
                acc
            };
        }
    }

    /// `Σ_j coeffs[j] b_j^{L,(m)}(s)` without materializing the row.
    pub fn eval_dot(&self, s: f64, m: usize, exps: &[f64], coeffs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.j_count {
            let cj = coeffs[j];
            if cj == 0.0 {
                continue;
            }
            let v = if s.abs() * self.widths[j] < TAU_SWITCH {
                let series = &self.series[m][j];
                let mut h = 0.0;
                for &c in series.iter().rev() {
                    h = h * (-s) + c;
                }
                h * exps[j + 1]
            } else {
                let inv_s = 1.0 / s;
                let stacks = &self.closed[m][j];
                let mut sum = 0.0;
                for (t, stack) in stacks.iter().enumerate() {
                    let mut h = 0.0;
                    for &d in stack.iter().rev() {
                        h = h * inv_s + d;
                    }
                    sum += exps[j + t] * h * inv_s;
                }
                sum
            };
            acc += cj * v;
        }
        acc
    }
}

/// Central moments `∫ u^n hat(u) du` of the unit hat shifted to its peak,
/// with left half-width `l` and right half-width `r`:
/// `[r^{n+1} + (-1)^n l^{n+1}] / ((n+1)(n+2))`.
fn hat_central_moment(l: f64, r: f64, n: usize) -> f64 {
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    (r.powi(n as i32 + 1) + sign * l.powi(n as i32 + 1)) / ((n as f64 + 1.0) * (n as f64 + 2.0))
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Series path: expand `e^{-sκ} = e^{-sb} e^{-s(κ-b)}` and integrate the
/// shifted moments term by term. Converges fast for `|s|(c-a) < 1`.
fn hat_laplace_series((a, b, c): (f64, f64, f64), s: f64, m: usize) -> f64 {
    let l = b - a;
    let r = c - b;
    // S_t = ∫ κ^m (κ-b)^t hat dκ via the binomial expansion of κ^m = (b+u)^m.
    let shifted_moment = |t: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..=m {
            acc += binomial(m, k) * b.powi((m - k) as i32) * hat_central_moment(l, r, k + t);
        }
        acc
    };
    let mut acc = 0.0;
    let mut s_pow = 1.0; // (-s)^t / t!
    for t in 0..SERIES_MAX_TERMS {
        let term = s_pow * shifted_moment(t);
        acc += term;
        if term.abs() <= 1e-18 * acc.abs() && t > 2 {
            break;
        }
        s_pow *= -s / (t as f64 + 1.0);
    }
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    sign * (-s * b).exp() * acc
}

/// Closed-form path: integrate `(-κ)^m ⋅ (linear) ⋅ e^{-sκ}` exactly on the
/// two hat pieces using the polynomial-times-exponential antiderivative.
fn hat_laplace_closed((a, b, c): (f64, f64, f64), s: f64, m: usize) -> f64 {
    let up = poly_exp_integral(&hat_piece_poly(m, 1.0 / (b - a), -a / (b - a)), a, b, s);
    let down = poly_exp_integral(&hat_piece_poly(m, -1.0 / (c - b), c / (c - b)), b, c, s);
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    sign * (up + down)
}

/// Coefficients of `κ^m (p1 κ + p0)` in the monomial basis.
fn hat_piece_poly(m: usize, p1: f64, p0: f64) -> Vec<f64> {
    let mut coeffs = vec![0.0; m + 2];
    coeffs[m] = p0;
    coeffs[m + 1] = p1;
    coeffs
}

/// `∫_{x0}^{x1} P(κ) e^{-sκ} dκ` with antiderivative
/// `-e^{-sκ} Σ_r P^{(r)}(κ) / s^{r+1}`.
fn poly_exp_integral(coeffs: &[f64], x0: f64, x1: f64, s: f64) -> f64 {
    let eval_all_derivs = |x: f64| -> f64 {
        let mut acc = 0.0;
        let mut s_inv_pow = 1.0 / s;
        for r in 0..coeffs.len() {
            // P^(r)(x) = Σ_{i>=r} coeffs[i] * i!/(i-r)! * x^{i-r}
            let mut dv = 0.0;
            for i in (r..coeffs.len()).rev() {
                let mut fall = 1.0;
                for f in 0..r {
                    fall *= (i - f) as f64;
                }
                dv += coeffs[i] * fall * x.powi((i - r) as i32);
            }
            acc += dv * s_inv_pow;
            s_inv_pow /= s;
        }
        acc
    };
    (-s * x0).exp() * eval_all_derivs(x0) - (-s * x1).exp() * eval_all_derivs(x1)
}

/// Output basis-function matrix `A` with `A[n][j] = b_j^L(s_n)`, row-major
/// `N x J`. `deriv = 1` yields `d/ds b_j^L(s_n)` instead, etc.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl OutputMatrix {
    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    /// `A * v` for a length-J vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|n| crate::dot(self.row(n), v)).collect()
    }

    /// `A^T * w` for a length-N vector.
    pub fn tr_mul_vec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for n in 0..self.rows {
            let r = self.row(n);
            let wn = w[n];
            for j in 0..self.cols {
                out[j] += wn * r[j];
            }
        }
        out
    }
}

/// Public builder: requires `s ⪰ 0`.
pub fn output_matrix(grid: &KnotGrid, s: &[f64]) -> Result<OutputMatrix> {
    if s.iter().any(|&v| !(v >= 0.0)) {
        return Err(SpectrumError::InvalidArgument("projection values must be >= 0".into()));
    }
    if s.is_empty() {
        return Err(SpectrumError::InvalidArgument("empty projection vector".into()));
    }
    Ok(output_matrix_unchecked(grid, s, 0))
}

/// Internal builder used by the forward model; accepts any finite `s` and a
/// derivative order.
pub(crate) fn output_matrix_unchecked(grid: &KnotGrid, s: &[f64], deriv: usize) -> OutputMatrix {
    let j_count = grid.spline_count();
    let tables = HatTables::new(grid, deriv);
    let mut data = vec![0.0; s.len() * j_count];
    data.par_chunks_mut(j_count).zip(s.par_iter()).for_each_init(
        Vec::new,
        |exps, (row, &sn)| {
            tables.fill_exps(sn, exps);
            tables.eval_row(sn, deriv, exps, row);
        },
    );
    OutputMatrix { rows: s.len(), cols: j_count, data }
}

/// Fused evaluation of `υ^L(s_n) = Σ_j I_j b_j^L(s_n)` and optionally its
/// first `s`-derivative, sharing the knot exponentials per row and never
/// materializing the `N x J` matrix.
pub(crate) fn upsilon_laplace_rows(
    grid: &KnotGrid,
    s: &[f64],
    coeffs: &[f64],
    with_deriv: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let tables = HatTables::new(grid, if with_deriv { 1 } else { 0 });
    let mut out = vec![0.0; s.len()];
    if with_deriv {
        let mut deriv = vec![0.0; s.len()];
        out.par_iter_mut().zip(deriv.par_iter_mut()).zip(s.par_iter()).for_each_init(
            Vec::new,
            |exps, ((o, d), &sn)| {
                tables.fill_exps(sn, exps);
                *o = tables.eval_dot(sn, 0, exps, coeffs);
                *d = tables.eval_dot(sn, 1, exps, coeffs);
            },
        );
        (out, Some(deriv))
    } else {
        out.par_iter_mut().zip(s.par_iter()).for_each_init(Vec::new, |exps, (o, &sn)| {
            tables.fill_exps(sn, exps);
            *o = tables.eval_dot(sn, 0, exps, coeffs);
        });
        (out, None)
    }
}

/// Constructs the B1 expansion of `υ(κ)` from energy-domain physics by
/// nonnegative least squares on a dense κ sampling (20 samples per knot
/// interval).
pub fn construct_spectrum(
    curve: &MassAttenuationCurve,
    table: &EnergySpectrumTable,
    grid: &KnotGrid,
) -> Result<MassAttenuationSpectrum> {
    let knots = grid.knots();
    let (lo, hi) = curve.kappa_bounds();
    let (grid_lo, grid_hi) = (knots[0], knots[knots.len() - 1]);
    if lo < grid_lo || hi > grid_hi {
        return Err(SpectrumError::Coverage { lo, hi, grid_lo, grid_hi });
    }
    let (e_lo, e_hi) = curve.energy_support();
    let (t_lo, t_hi) = table.support();
    if t_lo < e_lo - 1e-9 * e_lo.abs() || t_hi > e_hi + 1e-9 * e_hi.abs() {
        return Err(SpectrumError::InvalidArgument(
            "energy table support exceeds curve energy intervals".into(),
        ));
    }

    const SAMPLES_PER_INTERVAL: usize = 20;
    let j_count = grid.spline_count();
    // One equation per κ-cell, 20 cells per knot interval. Each equation is
    // weighted by sqrt(cell length) so the fit is a least squares in the κ
    // measure, and its target is the exact cell average of υ (the cell's
    // energy content per unit κ). The hats are linear inside each cell, so
    // this reproduces the Galerkin normal equations and conserves the total
    // energy even across K-edge jumps.
    let mut cells = Vec::with_capacity(SAMPLES_PER_INTERVAL * (j_count + 1));
    for w in knots.windows(2) {
        let step = (w[1] - w[0]) / SAMPLES_PER_INTERVAL as f64;
        for t in 0..SAMPLES_PER_INTERVAL {
            cells.push((w[0] + step * t as f64, w[0] + step * (t + 1) as f64));
        }
    }
    let weights: Vec<f64> = cells.iter().map(|&(lo, hi)| (hi - lo).sqrt()).collect();
    let targets: Vec<f64> = cells
        .iter()
        .zip(&weights)
        .map(|(&(lo, hi), &w)| w * curve.upsilon_cell_average(lo, hi, table))
        .collect();
    if targets.iter().all(|&v| v == 0.0) {
        return MassAttenuationSpectrum::new(grid.clone(), vec![0.0; j_count]);
    }
    let mut basis = vec![0.0; cells.len() * j_count];
    for (i, &(lo, hi)) in cells.iter().enumerate() {
        let mid = 0.5 * (lo + hi);
        for j in 1..=j_count {
            basis[i * j_count + j - 1] = weights[i] * hat_eval(grid.hat(j), mid);
        }
    }
    let coeffs = nnls(&basis, &targets, j_count);
    MassAttenuationSpectrum::new(grid.clone(), coeffs)
}

/// Lawson-Hanson nonnegative least squares for `min ||B x - y||, x >= 0`.
/// `b` is row-major with `cols` columns.
///
/// B1 basis rows have at most two adjacent nonzeros, so the Gram matrix is
/// tridiagonal and every passive-set solve reduces to Thomas sweeps over the
/// contiguous runs of the passive set.
fn nnls(b: &[f64], y: &[f64], cols: usize) -> Vec<f64> {
    let rows = y.len();
    let mut diag = vec![0.0; cols];
    let mut off = vec![0.0; cols.saturating_sub(1)]; // gram[j][j+1]
    let mut rhs = vec![0.0; cols];
    for i in 0..rows {
        let row = &b[i * cols..(i + 1) * cols];
        for p in 0..cols {
            let v = row[p];
            if v == 0.0 {
                continue;
            }
            rhs[p] += v * y[i];
            diag[p] += v * v;
            if p + 1 < cols && row[p + 1] != 0.0 {
                off[p] += v * row[p + 1];
            }
        }
    }
    let solve_passive = |passive: &[bool]| -> Vec<f64> {
        let mut z = vec![0.0; cols];
        let mut start = 0;
        while start < cols {
            if !passive[start] {
                start += 1;
                continue;
            }
            let mut end = start;
            while end + 1 < cols && passive[end + 1] {
                end += 1;
            }
            let k = end - start + 1;
            // Thomas sweep on the run [start, end].
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            let mut denom = diag[start];
            d[0] = rhs[start] / denom;
            if k > 1 {
                c[0] = off[start] / denom;
            }
            for r in 1..k {
                let j = start + r;
                denom = diag[j] - off[j - 1] * c[r - 1];
                d[r] = (rhs[j] - off[j - 1] * d[r - 1]) / denom;
                if r + 1 < k {
                    c[r] = off[j] / denom;
                }
            }
            z[end] = d[k - 1];
            for r in (0..k - 1).rev() {
                z[start + r] = d[r] - c[r] * z[start + r + 1];
            }
            start = end + 1;
        }
        z
    };

    let mut x = vec![0.0; cols];
    let mut passive = vec![false; cols];
    let tol = 1e-12 * rhs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _ in 0..20 * cols {
        // Gradient of 1/2||Bx-y||^2 is Gx - rhs; most negative free entry enters.
        let mut best: Option<(usize, f64)> = None;
        for j in 0..cols {
            if passive[j] {
                continue;
            }
            let mut g = diag[j] * x[j] - rhs[j];
            if j > 0 {
                g += off[j - 1] * x[j - 1];
            }
            if j + 1 < cols {
                g += off[j] * x[j + 1];
            }
            if g < -tol && best.map_or(true, |(_, bg)| g < bg) {
                best = Some((j, g));
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;
        loop {
            let z = solve_passive(&passive);
            if (0..cols).all(|j| !passive[j] || z[j] > 0.0) {
                x = z;
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha: f64 = 1.0;
            for j in 0..cols {
                if passive[j] && z[j] <= 0.0 && x[j] != z[j] {
                    alpha = alpha.min(x[j] / (x[j] - z[j]));
                }
            }
            for j in 0..cols {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                    if x[j] <= 0.0 {
                        x[j] = 0.0;
                        passive[j] = false;
                    }
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    for v in &mut x {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
    x
}

/// Applies the shift ambiguity: returns an equivalent `(spectrum, density)`
/// pair with identical noiseless output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    Left,
    Right,
}

pub fn shift_equivalent(
    spec: &MassAttenuationSpectrum,
    alpha: &Image,
    direction: ShiftDirection,
) -> Result<(MassAttenuationSpectrum, Image)> {
    let q = spec.grid.q();
    let j_count = spec.grid.spline_count();
    let coeffs = &spec.coeffs;
    match direction {
        ShiftDirection::Left => {
            if coeffs[0] != 0.0 {
                return Err(SpectrumError::ShiftUnavailable("leading coefficient must be zero".into()));
            }
            let mut shifted: Vec<f64> = coeffs[1..].iter().map(|&c| q * c).collect();
            shifted.push(0.0);
            debug_assert_eq!(shifted.len(), j_count);
            Ok((
                MassAttenuationSpectrum::new(spec.grid.clone(), shifted)?,
                alpha.scaled(q),
            ))
        }
        ShiftDirection::Right => {
            if coeffs[j_count - 1] != 0.0 {
                return Err(SpectrumError::ShiftUnavailable("trailing coefficient must be zero".into()));
            }
            let mut shifted = Vec::with_capacity(j_count);
            shifted.push(0.0);
            shifted.extend(coeffs[..j_count - 1].iter().map(|&c| c / q));
            Ok((
                MassAttenuationSpectrum::new(spec.grid.clone(), shifted)?,
                alpha.scaled(1.0 / q),
            ))
        }
    }
}

/// Singular values (descending) and numerical rank of an output matrix.
pub fn condition_diagnostic(a: &OutputMatrix, tol: Option<f64>) -> Result<(Vec<f64>, usize)> {
    if a.rows == 0 || a.cols == 0 {
        return Err(SpectrumError::InvalidArgument("empty matrix".into()));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(SpectrumError::InvalidArgument("matrix has non-finite entries".into()));
    }
    let m = nalgebra::DMatrix::from_row_slice(a.rows, a.cols, &a.data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let tol = tol.unwrap_or(1e-10);
    let cutoff = tol * sv[0];
    let rank = sv.iter().filter(|&&s| s > cutoff).count();
    Ok((sv, rank))
}


/// Fritsch-Carlson monotone cubic interpolation on strictly increasing
/// abscissae. Used for tabulated κ(ε) branches and their inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(SpectrumError::InvalidArgument("interpolant needs >= 2 matching samples".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpectrumError::InvalidArgument("abscissae must be strictly increasing".into()));
        }
        let n = xs.len();
        let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                // Harmonic-mean style slope limiter keeps the cubic monotone.
                let w1 = 2.0 * (xs[i + 1] - xs[i]) + (xs[i] - xs[i - 1]);
                let w2 = (xs[i + 1] - xs[i]) + 2.0 * (xs[i] - xs[i - 1]);
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        Ok(MonotoneCubic { xs: xs.to_vec(), ys: ys.to_vec(), slopes: m })
    }

    fn segment(&self, x: f64) -> usize {
        match self.xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.clamp(1, self.xs.len() - 1) - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1, m0, m1) = (self.ys[i], self.ys[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * h * (t3 - 2.0 * t2 + t)
            + y1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * h * (t3 - t2)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1, m0, m1) = (self.ys[i], self.ys[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        (y0 * (6.0 * t2 - 6.0 * t) + y1 * (6.0 * t - 6.0 * t2)) / h
            + m0 * (3.0 * t2 - 4.0 * t + 1.0)
            + m1 * (3.0 * t2 - 2.0 * t)
    }
}
