//! The latent-variable model abstraction and three concrete instances.
//!
//! A model couples a decoder p_θ(x|z) with a fixed, parameter-free prior
//! p(z), so the complete-data log-likelihood ℓ(θ|x,z) = log p_θ(x|z) + log
//! p(z) and its θ-score never touch prior terms. Estimators see models
//! through [`LatentModel`] with a flat parameter vector θ; the typed
//! structures ([`GaussianMixtureModel`], [`LinearGaussianModel`]) carry the
//! same information for closed-form work and convert losslessly.
//!
//! The three instances ladder up in difficulty: the mixture has a tractable
//! E-step, the linear-Gaussian model has closed-form posterior and marginal
//! (the oracle for every variational bound test), and the nonlinear model is
//! the general case that only the variational estimators can touch.

mod gmm;
mod linear_gaussian;
mod nonlinear;

pub use gmm::{gmm_responsibilities, GaussianMixtureModel, GmmFamily, GMM_VARIANCE_FLOOR};
pub use linear_gaussian::{lg_log_marginal, lg_posterior, LgFamily, LinearGaussianModel};
pub use nonlinear::{NlFamily, NonlinearGaussianModel};

use thiserror::Error;

use crate::diffnet::DiffnetError;
use crate::numkit::{self, NumError, QuadGrid, RngStream, Vector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{model} does not support {op}")]
    Capability {
        model: &'static str,
        op: &'static str,
    },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Net(#[from] DiffnetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    /// z ∈ ℝ^k with prior N(0, I_k).
    Continuous { k: usize },
    /// One-hot z over `categories` components.
    Discrete { categories: usize },
}

/// A latent-variable model seen through a flat parameter vector θ.
///
/// `complete_loglik` must be exact; the gradient capabilities may be absent
/// (the mixture model only supports the EM path) and then return a
/// capability error rather than an approximation.
pub trait LatentModel {
    fn name(&self) -> &'static str;
    fn data_dim(&self) -> usize;
    fn latent_kind(&self) -> LatentKind;
    fn param_len(&self) -> usize;

    /// Length of the latent encoding: k for continuous, K (one-hot) for
    /// discrete models.
    fn latent_len(&self) -> usize {
        match self.latent_kind() {
            LatentKind::Continuous { k } => k,
            LatentKind::Discrete { categories } => categories,
        }
    }

    /// ℓ(θ|x,z) = log p_θ(x|z) + log p(z).
    fn complete_loglik(&self, theta: &Vector, x: &Vector, z: &Vector) -> f64;

    /// ∇_θ ℓ(θ|x,z).
    fn score_theta(&self, _theta: &Vector, _x: &Vector, _z: &Vector) -> Result<Vector, ModelError> {
        Err(ModelError::Capability {
            model: self.name(),
            op: "score_theta",
        })
    }

    /// ∇_z ℓ(θ|x,z).
    fn grad_z(&self, _theta: &Vector, _x: &Vector, _z: &Vector) -> Result<Vector, ModelError> {
        Err(ModelError::Capability {
            model: self.name(),
            op: "grad_z",
        })
    }

    fn sample_prior(&self, theta: &Vector, rng: &mut RngStream) -> Vector;

    fn sample_decoder(&self, theta: &Vector, z: &Vector, rng: &mut RngStream) -> Vector;
}

/// Brute-force log p_θ(x) = log ∫ exp ℓ(θ|x,z) dz over a quadrature grid.
/// Only continuous latents of dimension ≤ 2 are supported; the grid must
/// cover at least eight prior standard deviations.
pub fn quadrature_log_marginal(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
    grid: &QuadGrid,
) -> Result<f64, ModelError> {
    match model.latent_kind() {
        LatentKind::Continuous { k } if k <= 2 => {
            if grid.dim() != k {
                return Err(ModelError::Num(NumError::Dim(format!(
                    "grid dimension {} does not match latent dimension {k}",
                    grid.dim()
                ))));
            }
            Ok(numkit::log_integral(grid, |z| {
                model.complete_loglik(theta, x, z)
            }))
        }
        LatentKind::Continuous { k } => Err(ModelError::Num(NumError::Unsupported(format!(
            "quadrature supports k <= 2, model has k = {k}"
        )))),
        LatentKind::Discrete { .. } => Err(ModelError::Capability {
            model: model.name(),
            op: "quadrature_log_marginal (discrete latent)",
        }),
    }
}

/// One-hot encoding of component `j` among `k`.
pub fn one_hot(k: usize, j: usize) -> Vector {
    assert!(j < k, "one_hot index out of range");
    let mut z = Vector::zeros(k);
    z[j] = 1.0;
    z
}

/// Index encoded by a one-hot vector.
pub fn hot_index(z: &Vector) -> usize {
    z.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .expect("empty latent vector")
}
