//! Empirical neural tangent kernel spectra for toy models.
//!
//! The crate trains two small models — a tied-weight ReLU autoencoder
//! ("toy model of superposition") and a quadratic MLP on modular addition —
//! assembles their empirical NTKs from closed-form Jacobians, and studies the
//! eigenvectors above large eigenvalue drops ("cliffs"): how they align with
//! ground-truth features, how per-axis Laplacian rotations separate Fourier
//! families inside a cliff, and how the spectrum changes across training.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what every analysis uses.

pub mod data;
pub mod disentangle;
pub mod entk;
pub mod error;
pub mod io;
pub mod linalg;
pub mod models;
pub mod scalar;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Matrix = linalg::Matrix<f64>;
pub type SymMatrix = linalg::SymMatrix<f64>;
pub type Spectrum = linalg::Spectrum<f64>;
pub type Dataset = data::Dataset<f64>;
pub type FeatureMatrix = data::FeatureMatrix<f64>;
pub type TmsParams = models::TmsParams<f64>;
pub type ModMlpParams = models::ModMlpParams<f64>;
pub type ModelParams = models::ModelParams<f64>;
pub type KernelMatrix = entk::KernelMatrix<f64>;
pub type FactoredKernel = entk::FactoredKernel<f64>;
pub type TorusLaplacian = disentangle::TorusLaplacian<f64>;
pub type RotatedBasis = disentangle::RotatedBasis<f64>;
