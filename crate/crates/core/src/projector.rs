//! Fan-beam system matrix and filtered back-projection.
//!
//! Rays are traced with Siddon-style traversal so each matrix entry is the
//! exact intersection length of the ray with a pixel, which keeps the matrix
//! nonnegative and the adjoint consistent. The detector is a flat array
//! rebinned to a virtual line through the rotation center.

use rayon::prelude::*;
use thiserror::Error;

use crate::Image;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ProjectorError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, ProjectorError>;

/// Fan-beam acquisition geometry in pixel units. The image is an
/// `image_side x image_side` grid of unit pixels centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    pub image_side: usize,
    pub source_to_center: f64,
    pub detector_count: usize,
    pub detector_pitch: f64,
    pub angles_deg: Vec<f64>,
    pub circular_mask: bool,
}

impl FanBeamGeometry {
    /// Equi-spaced full-circle scan with `n_angles` projections.
    pub fn equispaced(
        image_side: usize,
        source_to_center: f64,
        detector_count: usize,
        detector_pitch: f64,
        n_angles: usize,
    ) -> Result<Self> {
        let angles_deg = (0..n_angles).map(|a| 360.0 * a as f64 / n_angles as f64).collect();
        let g = FanBeamGeometry {
            image_side,
            source_to_center,
            detector_count,
            detector_pitch,
            angles_deg,
            circular_mask: true,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_side as f64;
        if self.source_to_center <= n / std::f64::consts::SQRT_2 {
            return Err(ProjectorError::InvalidGeometry(format!(
                "source distance {} must exceed image half-diagonal {}",
                self.source_to_center,
                n / std::f64::consts::SQRT_2
            )));
        }
        if self.detector_count < 1 {
            return Err(ProjectorError::InvalidGeometry("detector_count must be >= 1".into()));
        }
        if !(self.detector_pitch > 0.0) {
            return Err(ProjectorError::InvalidGeometry("detector_pitch must be > 0".into()));
        }
        if self.angles_deg.iter().any(|&a| !(0.0..360.0).contains(&a)) {
            return Err(ProjectorError::InvalidGeometry("angles must lie in [0, 360)".into()));
        }
        if self.angles_deg.is_empty() {
            return Err(ProjectorError::InvalidGeometry("need at least one angle".into()));
        }
        Ok(())
    }

    pub fn ray_count(&self) -> usize {
        self.detector_count * self.angles_deg.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Offset of detector element `k` on the virtual detector line.
    fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.detector_count as f64 - 1.0) / 2.0) * self.detector_pitch
    }
}

/// Sparse nonnegative projection operator in CSR form, with a precomputed
/// transpose so both `Φx` and `Φᵀy` are row-parallel products with
/// fixed-order accumulation (bit-stable across thread counts).
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    t_indptr: Vec<usize>,
    t_indices: Vec<u32>,
    t_values: Vec<f64>,
}

impl SystemMatrix {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn column(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.t_indptr[j], self.t_indptr[j + 1]);
        (&self.t_indices[a..b], &self.t_values[a..b])
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Scales all weights, e.g. to fold a path-length calibration factor
    /// into the operator.
    pub fn scaled(&self, c: f64) -> SystemMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= c);
        m.t_values.iter_mut().for_each(|v| *v *= c);
        m
    }

    /// `Φ x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(ProjectorError::InvalidArgument(format!(
                "expected {} pixels, got {}",
                self.ncols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.nrows];
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let (idx, val) = self.row(i);
            let mut acc = 0.0;
            for (j, v) in idx.iter().zip(val) {
                acc += x[*j as usize] * v;
            }
            *o = acc;
        });
        Ok(out)
    }

    /// `Φᵀ y`.
    pub fn backproject(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.nrows {
            return Err(ProjectorError::InvalidArgument(format!(
                "expected {} measurements, got {}",
                self.nrows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.ncols];
        out.par_iter_mut().enumerate().for_each(|(j, o)| {
            let (idx, val) = self.column(j);
            let mut acc = 0.0;
            for (i, v) in idx.iter().zip(val) {
                acc += y[*i as usize] * v;
            }
            *o = acc;
        });
        Ok(out)
    }
}

/// Ray endpoints for measurement `(angle a, detector k)`: source position
/// and a point on the virtual detector line; the traced ray is the infinite
/// line through them.
fn ray_endpoints(geom: &FanBeamGeometry, angle_deg: f64, k: usize) -> ([f64; 2], [f64; 2]) {
    let phi = angle_deg.to_radians();
    let es = [phi.cos(), phi.sin()];
    let u = [-phi.sin(), phi.cos()];
    let d = geom.source_to_center;
    let t = geom.detector_offset(k);
    let source = [d * es[0], d * es[1]];
    let det = [t * u[0], t * u[1]];
    (source, det)
}

/// Exact pixel intersection lengths of the line through `p0`/`p1` with the
/// unit-pixel grid, Siddon-style. Returns `(pixel index, length)` pairs in
/// traversal order.
fn trace_ray(n: usize, p0: [f64; 2], p1: [f64; 2], mask: Option<&[bool]>) -> Vec<(u32, f64)> {
    let half = n as f64 / 2.0;
    let dir = [p1[0] - p0[0], p1[1] - p0[1]];
    let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if len == 0.0 {
        return Vec::new();
    }
    // Entry/exit parameters of the infinite line with the image square.
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis] == 0.0 {
            if p0[axis].abs() >= half {
                return Vec::new();
            }
        } else {
            let t1 = (-half - p0[axis]) / dir[axis];
            let t2 = (half - p0[axis]) / dir[axis];
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
    }
    if tmin >= tmax {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(2 * n);
    let eps = 1e-12;
    let pos = |t: f64, axis: usize| p0[axis] + t * dir[axis];
    let mut ix = ((pos(tmin + eps, 0) + half).floor() as isize).clamp(0, n as isize - 1);
    let mut iy = ((pos(tmin + eps, 1) + half).floor() as isize).clamp(0, n as isize - 1);
    let step_x = if dir[0] > 0.0 { 1 } else { -1 };
    let step_y = if dir[1] > 0.0 { 1 } else { -1 };
    // Parameter of the next grid-line crossing per axis.
    let next_crossing = |i: isize, step: isize, axis: usize| -> f64 {
        if dir[axis] == 0.0 {
            f64::INFINITY
        } else {
            let boundary = (i + if step > 0 { 1 } else { 0 }) as f64 - half;
            (boundary - p0[axis]) / dir[axis]
        }
    };
    let mut tx = next_crossing(ix, step_x, 0);
    let mut ty = next_crossing(iy, step_y, 1);
    let mut t = tmin;
    while t < tmax - eps {
        let t_next = tx.min(ty).min(tmax);
        if t_next > t {
            let seg = (t_next - t) * len;
            if ix >= 0 && iy >= 0 && (ix as usize) < n && (iy as usize) < n {
                // Row 0 of the image is the top of the picture (y = +half).
                let row = (n as isize - 1 - iy) as usize;
                let col = ix as usize;
                let idx = row * n + col;
                let keep = mask.map_or(true, |m| m[idx]);
                if keep && seg > 0.0 {
                    out.push((idx as u32, seg));
                }
            }
        }
        if tx <= ty {
            ix += step_x;
            tx = next_crossing(ix, step_x, 0);
        } else {
            iy += step_y;
            ty = next_crossing(iy, step_y, 1);
        }
        t = t_next;
        if ix < -1 || iy < -1 || ix > n as isize || iy > n as isize {
            break;
        }
    }
    out
}

/// Pixel-center coordinates `(x, y)` for image index `idx`.
pub(crate) fn pixel_center(n: usize, idx: usize) -> (f64, f64) {
    let half = n as f64 / 2.0;
    let row = idx / n;
    let col = idx % n;
    let x = col as f64 + 0.5 - half;
    let y = (n - 1 - row) as f64 + 0.5 - half;
    (x, y)
}

fn circle_mask(n: usize) -> Vec<bool> {
    let r2 = (n as f64 / 2.0) * (n as f64 / 2.0);
    (0..n * n)
        .map(|idx| {
            let (x, y) = pixel_center(n, idx);
            x * x + y * y <= r2
        })
        .collect()
}

/// Builds the sparse fan-beam projection matrix for the geometry. Rows are
/// ordered angle-major: `row = angle_index * detector_count + detector_index`.
pub fn build_system_matrix(geom: &FanBeamGeometry) -> Result<SystemMatrix> {
    geom.validate()?;
    let n = geom.image_side;
    let mask = if geom.circular_mask { Some(circle_mask(n)) } else { None };
    let rows: Vec<Vec<(u32, f64)>> = (0..geom.ray_count())
        .into_par_iter()
        .map(|ray| {
            let a = ray / geom.detector_count;
            let k = ray % geom.detector_count;
            let (p0, p1) = ray_endpoints(geom, geom.angles_deg[a], k);
            trace_ray(n, p0, p1, mask.as_deref())
        })
        .collect();

    let nrows = rows.len();
    let ncols = n * n;
    let mut indptr = Vec::with_capacity(nrows + 1);
    indptr.push(0);
    let mut nnz = 0;
    for r in &rows {
        nnz += r.len();
        indptr.push(nnz);
    }
    let mut indices = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    for r in &rows {
        for &(j, v) in r {
            indices.push(j);
            values.push(v);
        }
    }

    // Deterministic transpose by counting sort over columns.
    let mut t_indptr = vec![0usize; ncols + 1];
    for &j in &indices {
        t_indptr[j as usize + 1] += 1;
    }
    for j in 0..ncols {
        t_indptr[j + 1] += t_indptr[j];
    }
    let mut t_indices = vec![0u32; nnz];
    let mut t_values = vec![0.0; nnz];
    let mut cursor = t_indptr.clone();
    for (i, _) in rows.iter().enumerate() {
        for p in indptr[i]..indptr[i + 1] {
            let j = indices[p] as usize;
            let dst = cursor[j];
            t_indices[dst] = i as u32;
            t_values[dst] = values[p];
            cursor[j] += 1;
        }
    }

    Ok(SystemMatrix { nrows, ncols, indptr, indices, values, t_indptr, t_indices, t_values })
}

/// Apodization for the ramp filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    RamLak,
    Hann,
}

/// Weighted fan-beam filtered back-projection for the flat virtual detector
/// at the rotation center: cosine weighting, ramp filter (default Hann
/// apodized), and distance-weighted back-projection. Output is signed.
pub fn fbp(y: &[f64], geom: &FanBeamGeometry, filter: FbpFilter) -> Result<Image> {
    geom.validate()?;
    if y.len() != geom.ray_count() {
        return Err(ProjectorError::InvalidArgument(format!(
            "expected {} measurements, got {}",
            geom.ray_count(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProjectorError::InvalidArgument("measurements must be finite".into()));
    }
    let n = geom.image_side;
    let nk = geom.detector_count;
    let tau = geom.detector_pitch;
    let d = geom.source_to_center;

    // Discrete ramp kernel h[k]; Hann apodization is the [1/4, 1/2, 1/4]
    // smoothing of h in the spatial domain.
    let mut h = vec![0.0; 2 * nk + 1];
    for (off, hv) in h.iter_mut().enumerate() {
        let k = off as isize - nk as isize;
        *hv = if k == 0 {
            1.0 / (4.0 * tau * tau)
        } else if k % 2 != 0 {
            -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (k * k) as f64 * tau * tau)
        } else {
            0.0
        };
    }
    if filter == FbpFilter::Hann {
        let raw = h.clone();
        for i in 0..h.len() {
            let prev = if i > 0 { raw[i - 1] } else { 0.0 };
            let next = if i + 1 < raw.len() { raw[i + 1] } else { 0.0 };
            h[i] = 0.25 * prev + 0.5 * raw[i] + 0.25 * next;
        }
    }

    // Per-angle cosine weighting and ramp filtering.
    let filtered: Vec<Vec<f64>> = (0..geom.angles_deg.len())
        .into_par_iter()
        .map(|a| {
            let proj = &y[a * nk..(a + 1) * nk];
            let weighted: Vec<f64> = (0..nk)
                .map(|k| {
                    let t = geom.detector_offset(k);
                    proj[k] * d / (d * d + t * t).sqrt()
                })
                .collect();
            (0..nk)
                .map(|k| {
                    let mut acc = 0.0;
                    for (m, w) in weighted.iter().enumerate() {
                        acc += w * h[k + nk - m];
                    }
                    acc * tau
                })
                .collect()
        })
        .collect();

    let mask = circle_mask(n);
    let dbeta = 2.0 * std::f64::consts::PI / geom.angles_deg.len() as f64;
    let mut img = vec![0.0; n * n];
    img.par_iter_mut().enumerate().for_each(|(idx, out)| {
        if geom.circular_mask && !mask[idx] {
            return;
        }
        let (x, yc) = pixel_center(n, idx);
        let mut acc = 0.0;
        for (a, row) in filtered.iter().enumerate() {
            let phi = geom.angles_deg[a].to_radians();
            let es = (phi.cos(), phi.sin());
            let u = (-phi.sin(), phi.cos());
            let denom = d - (x * es.0 + yc * es.1);
            if denom <= 0.0 {
                continue;
            }
            let t = d * (x * u.0 + yc * u.1) / denom;
            let pos = t / tau + (nk as f64 - 1.0) / 2.0;
            if pos < 0.0 || pos > (nk - 1) as f64 {
                continue;
            }
            let k0 = pos.floor() as usize;
            let k1 = (k0 + 1).min(nk - 1);
            let frac = pos - k0 as f64;
            let q = row[k0] * (1.0 - frac) + row[k1] * frac;
            let uw = denom / d;
            acc += q / (uw * uw);
        }
        // Full-circle fan data covers every line twice.
        *out = acc * dbeta / 2.0;
    });
    Ok(Image::from_vec(n, img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_geom() -> FanBeamGeometry {
        FanBeamGeometry::equispaced(16, 40.0, 24, 1.0, 8).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(FanBeamGeometry::equispaced(16, 5.0, 24, 1.0, 8).is_err());
        assert!(FanBeamGeometry::equispaced(16, 40.0, 0, 1.0, 8).is_err());
        let mut g = small_geom();
        g.angles_deg[0] = 400.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn projection_is_linear_and_zero_on_zero() {
        let phi = build_system_matrix(&small_geom()).unwrap();
        let zero = vec![0.0; phi.ncols()];
        assert!(phi.project(&zero).unwrap().iter().all(|&v| v == 0.0));
        assert!(phi.backproject(&vec![0.0; phi.nrows()]).unwrap().iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..phi.ncols()).map(|i| (i % 7) as f64 * 0.25).collect();
        let y1 = phi.project(&x).unwrap();
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let y3 = phi.project(&x3).unwrap();
        for (a, b) in y1.iter().zip(&y3) {
            assert_relative_eq!(3.0 * a, *b, max_relative = 1e-14, epsilon = 1e-14);
        }
        assert!(phi.project(&zero[..3]).is_err());
    }

    #[test]
    fn entries_nonnegative_and_bounded_by_pixel_diagonal() {
        let phi = build_system_matrix(&small_geom()).unwrap();
        assert!(phi.min_value() >= 0.0);
        assert!(phi.max_value() <= std::f64::consts::SQRT_2 + 1e-12);
        assert!(phi.nnz() > 0);
    }

    #[test]
    fn masked_pixels_have_empty_columns() {
        let phi = build_system_matrix(&small_geom()).unwrap();
        // Corner pixel lies outside the inscribed circle.
        let (idx, _) = phi.column(0);
        assert!(idx.is_empty());
    }

    #[test]
    fn central_ray_matches_disk_chord() {
        let n = 64;
        let geom = FanBeamGeometry::equispaced(n, 160.0, n, 1.0, 4).unwrap();
        let phi = build_system_matrix(&geom).unwrap();
        let r = n as f64 / 4.0;
        let mut img = Image::zeros(n);
        for idx in 0..n * n {
            let (x, y) = pixel_center(n, idx);
            if x * x + y * y <= r * r {
                img.as_mut_slice()[idx] = 1.0;
            }
        }
        let y = phi.project(img.as_slice()).unwrap();
        // The two central detectors straddle the center line.
        let k = n / 2;
        let chord = 0.5 * (y[k - 1] + y[k]);
        assert_relative_eq!(chord, 2.0 * r, max_relative = 0.02);
    }

    #[test]
    fn adjoint_identity_on_random_pairs() {
        let phi = build_system_matrix(&small_geom()).unwrap();
        let mut state = 99u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..20 {
            let x: Vec<f64> = (0..phi.ncols()).map(|_| rnd()).collect();
            let y: Vec<f64> = (0..phi.nrows()).map(|_| rnd()).collect();
            let ax = phi.project(&x).unwrap();
            let aty = phi.backproject(&y).unwrap();
            let lhs = crate::dot(&ax, &y);
            let rhs = crate::dot(&x, &aty);
            let scale = crate::norm2(&ax) * crate::norm2(&y);
            assert!((lhs - rhs).abs() <= 1e-10 * scale.max(1e-30));
        }
    }

    #[test]
    fn matvec_matches_dense_oracle() {
        let geom = FanBeamGeometry::equispaced(16, 40.0, 16, 1.2, 8).unwrap();
        let phi = build_system_matrix(&geom).unwrap();
        let mut dense = vec![0.0; phi.nrows() * phi.ncols()];
        for i in 0..phi.nrows() {
            let (idx, val) = phi.row(i);
            for (j, v) in idx.iter().zip(val) {
                dense[i * phi.ncols() + *j as usize] = *v;
            }
        }
        let x: Vec<f64> = (0..phi.ncols()).map(|i| ((i * 31 + 7) % 11) as f64 / 11.0).collect();
        let fast = phi.project(&x).unwrap();
        for i in 0..phi.nrows() {
            let slow: f64 = (0..phi.ncols()).map(|j| dense[i * phi.ncols() + j] * x[j]).sum();
            assert_relative_eq!(fast[i], slow, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn fbp_zero_and_linear() {
        let geom = FanBeamGeometry::equispaced(32, 96.0, 48, 1.0, 36).unwrap();
        let zero = vec![0.0; geom.ray_count()];
        let img = fbp(&zero, &geom, FbpFilter::Hann).unwrap();
        assert!(img.as_slice().iter().all(|&v| v == 0.0));
        let y: Vec<f64> = (0..geom.ray_count()).map(|i| ((i % 13) as f64 - 6.0) / 6.0).collect();
        let f1 = fbp(&y, &geom, FbpFilter::Hann).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let f2 = fbp(&y2, &geom, FbpFilter::Hann).unwrap();
        for (a, b) in f1.as_slice().iter().zip(f2.as_slice()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12, epsilon = 1e-12);
        }
        assert!(fbp(&y[..5], &geom, FbpFilter::Hann).is_err());
    }
}
