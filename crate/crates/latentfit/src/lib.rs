//! Latent-variable model fitting: EM, Monte Carlo EM, mean-field variational
//! inference, amortized variational autoencoders, and denoising diffusion,
//! sharing one numerical substrate and one model interface.
//!
//! The crate is organized as a ladder: every rung targets the same marginal
//! log-likelihood objective and every estimator on a rung is cross-checked
//! against an analytic oracle from the rung below.
//!
//! - [`numkit`]: seeded RNG streams, Gaussian densities, quadrature,
//!   Gaussian conditioning, finite differences.
//! - [`diffnet`]: minimal dense networks with exact reverse-mode gradients.
//! - [`models`]: the [`models::LatentModel`] interface plus Gaussian mixture,
//!   linear-Gaussian, and nonlinear-Gaussian instances.
//! - [`em`], [`meanfield`], [`amortized`], [`ddm`]: the estimators.
//! - [`harness`]: configs, datasets, checkpoints, metrics, and the
//!   verification suites behind the command-line interface.

pub mod amortized;
pub mod ddm;
pub mod diffnet;
pub mod em;
pub mod harness;
pub mod meanfield;
pub mod models;
pub mod numkit;

pub use numkit::{Matrix, Vector};
