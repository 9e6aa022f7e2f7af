//! Blind polychromatic X-ray CT reconstruction toolkit.
//!
//! The measurement model reparameterizes the polychromatic Beer-Lambert
//! integral from photon energy to mass attenuation, so that the unknown
//! incident spectrum and the unknown material attenuation collapse into a
//! single *mass-attenuation spectrum* expanded in first-order B-splines on a
//! geometric knot grid. Noiseless detector outputs are then Laplace
//! transforms of that spectrum evaluated at the monochromatic projections.
//!
//! Modules:
//! - [`spectrum`]: B1-spline basis, closed-form Laplace transforms, spectrum
//!   construction from energy-domain physics, spectral diagnostics.
//! - [`projector`]: fan-beam system matrix, adjoint, filtered back-projection.
//! - [`model`]: polychromatic forward model, lognormal/Poisson likelihoods,
//!   gradients, and biconvexity certificates.
//! - [`prox`]: nonnegativity/TV/wavelet-l1 proximal operators.
//! - [`solvers`]: NPG step, box-constrained limited-memory BFGS, and the
//!   NPG-BFGS / PG-BFGS block coordinate-descent drivers.
//! - [`pipeline`]: phantoms, measurement simulation with calibration,
//!   linearization baselines, and metrics.
//! - [`io`]: CSV and graymap interchange formats.

pub mod io;
pub mod model;
pub mod pipeline;
pub mod projector;
pub mod prox;
pub mod solvers;
pub mod spectrum;

/// Square nonnegative density-map image, stored row-major.
///
/// Intermediate solver arithmetic (gradient steps, Nesterov extrapolation)
/// may hold negative entries; nonnegativity is restored by the proximal
/// operators, not enforced by the container.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Image { side, data: vec![0.0; side * side] }
    }

    pub fn from_vec(side: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), side * side, "image data must be side*side");
        Image { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.side + col] = v;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Image {
        Image { side: self.side, data: self.data.iter().map(|v| c * v).collect() }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
