//! Deterministic numerical substrate: seeded random streams, Gaussian
//! densities, a quadrature oracle for low-dimensional marginals, exact
//! Gaussian conditioning, and a finite-difference gradient checker.
//!
//! Everything downstream (EM, variational fits, diffusion) is validated
//! against this module, so the rules here are strict: densities live in log
//! space, dimensions are checked before arithmetic, and every stochastic
//! operation is a pure function of an explicit [`RngStream`].

mod fdiff;
mod gaussian;
mod quad;
mod rng;
pub mod stats;

pub use fdiff::{finite_diff_grad, rel_error};
pub use gaussian::{
    entropy_gaussian_diag, gaussian_condition, kl_gaussian_dense, log_pdf_gaussian_diag,
    GaussianDense, GaussianDiag, LN_2PI,
};
pub use quad::{log_integral, QuadGrid};
pub use rng::RngStream;

use thiserror::Error;

/// Column vector of `f64`, dimension checked at runtime.
pub type Vector = nalgebra::DVector<f64>;
/// Dense `f64` matrix, dimensions checked at runtime.
pub type Matrix = nalgebra::DMatrix<f64>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("unsupported: {0}")]
    Unsupported(String),
}
