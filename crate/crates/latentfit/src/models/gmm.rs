use super::{hot_index, one_hot, LatentKind, LatentModel, ModelError};
use crate::numkit::stats::logsumexp;
use crate::numkit::{log_pdf_gaussian_diag, RngStream, Vector};

/// Lower bound on component variances; prevents likelihood blow-up when a
/// component collapses onto coincident points.
pub const GMM_VARIANCE_FLOOR: f64 = 1e-6;

/// Isotropic Gaussian mixture: K components in ℝ^d with means μ_j, scalar
/// variances v_j, and mixing weights π on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureModel {
    pub means: Vec<Vector>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixtureModel {
    pub fn new(
        means: Vec<Vector>,
        variances: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let k = means.len();
        if k == 0 || variances.len() != k || weights.len() != k {
            return Err(ModelError::Params(
                "means/variances/weights must share a nonzero length".into(),
            ));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(ModelError::Params("component means differ in dimension".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(ModelError::Params("variances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-8 {
            return Err(ModelError::Params(
                "weights must be positive and sum to 1".into(),
            ));
        }
        Ok(GaussianMixtureModel {
            means,
            variances,
            weights,
        })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// log π_j + log N(x; μ_j, v_j I) for every component.
    pub fn component_log_joint(&self, x: &Vector) -> Vec<f64> {
        (0..self.n_components())
            .map(|j| {
                let var = Vector::from_element(self.dim(), self.variances[j]);
                self.weights[j].ln()
                    + log_pdf_gaussian_diag(x, &self.means[j], &var)
                        .expect("variance validated at construction")
            })
            .collect()
    }

    /// Observed-data log-likelihood ℓ(θ|x) = log Σ_j π_j N(x; μ_j, v_j I).
    pub fn log_likelihood(&self, x: &Vector) -> f64 {
        logsumexp(&self.component_log_joint(x))
    }

    /// Σ_i ℓ(θ|x_i) over a dataset.
    pub fn total_log_likelihood(&self, data: &[Vector]) -> f64 {
        data.iter().map(|x| self.log_likelihood(x)).sum()
    }
}

/// Posterior component probabilities p_θ(z = j | x); sums to 1.
pub fn gmm_responsibilities(model: &GaussianMixtureModel, x: &Vector) -> Vec<f64> {
    let log_joint = model.component_log_joint(x);
    let log_norm = logsumexp(&log_joint);
    log_joint.iter().map(|lj| (lj - log_norm).exp()).collect()
}

/// The mixture family seen through a flat θ = [means row-major, variances,
/// weights]. Supports the EM path only: no score_theta / grad_z.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GmmFamily {
    pub components: usize,
    pub dim: usize,
}

impl GmmFamily {
    pub fn new(components: usize, dim: usize) -> Self {
        assert!(components >= 1 && dim >= 1);
        GmmFamily { components, dim }
    }

    pub fn pack(&self, model: &GaussianMixtureModel) -> Vector {
        assert_eq!(model.n_components(), self.components);
        assert_eq!(model.dim(), self.dim);
        let mut theta = Vector::zeros(self.param_len());
        let mut off = 0;
        for m in &model.means {
            for j in 0..self.dim {
                theta[off] = m[j];
                off += 1;
            }
        }
        for v in &model.variances {
            theta[off] = *v;
            off += 1;
        }
        for w in &model.weights {
            theta[off] = *w;
            off += 1;
        }
        theta
    }

    pub fn unpack(&self, theta: &Vector) -> Result<GaussianMixtureModel, ModelError> {
        if theta.len() != self.param_len() {
            return Err(ModelError::Params(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                theta.len()
            )));
        }
        let (k, d) = (self.components, self.dim);
        let means = (0..k)
            .map(|j| Vector::from_fn(d, |i, _| theta[j * d + i]))
            .collect();
        let variances = (0..k).map(|j| theta[k * d + j]).collect();
        let weights = (0..k).map(|j| theta[k * d + k + j]).collect();
        GaussianMixtureModel::new(means, variances, weights)
    }
}

impl LatentModel for GmmFamily {
    fn name(&self) -> &'static str {
        "gmm"
    }

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn latent_kind(&self) -> LatentKind {
        LatentKind::Discrete {
            categories: self.components,
        }
    }

    fn param_len(&self) -> usize {
        self.components * self.dim + 2 * self.components
    }

    fn complete_loglik(&self, theta: &Vector, x: &Vector, z: &Vector) -> f64 {
        assert_eq!(z.len(), self.components, "latent must be one-hot over K");
        let model = self.unpack(theta).expect("invalid mixture parameters");
        let j = hot_index(z);
        model.component_log_joint(x)[j]
    }

    fn sample_prior(&self, theta: &Vector, rng: &mut RngStream) -> Vector {
        let model = self.unpack(theta).expect("invalid mixture parameters");
        one_hot(self.components, rng.categorical(&model.weights))
    }

    fn sample_decoder(&self, theta: &Vector, z: &Vector, rng: &mut RngStream) -> Vector {
        let model = self.unpack(theta).expect("invalid mixture parameters");
        let j = hot_index(z);
        let sd = model.variances[j].sqrt();
        &model.means[j] + rng.sample_std_normal(self.dim) * sd
    }
}
