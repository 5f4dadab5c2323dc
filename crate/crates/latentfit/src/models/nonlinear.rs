use std::sync::atomic::{AtomicU64, Ordering};

use super::{LatentKind, LatentModel, ModelError};
use crate::diffnet::{
    clamp_log_var, init_params, mlp_forward, mlp_grad, MlpParams, MlpSpec,
};
use crate::numkit::{log_pdf_gaussian_diag, RngStream, Vector};

/// The general model: X|Z ~ N(μ_θ(Z), σ²_θ(Z) I_d), Z ~ N(0, I_k), with a
/// mean network ℝ^k → ℝ^d and a scalar log-variance network ℝ^k → ℝ.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearGaussianModel {
    pub mean_net: MlpParams,
    pub log_var_net: MlpParams,
}

/// The nonlinear family seen through a flat θ = [mean-net params,
/// log-variance-net params].
///
/// The variance head is exponentiated only at the use site and clamped to
/// the diffnet log-variance range; saturation bumps a warning counter
/// instead of raising, so optimization can keep running while tests observe
/// the event.
#[derive(Debug)]
pub struct NlFamily {
    mean_spec: MlpSpec,
    log_var_spec: MlpSpec,
    saturations: AtomicU64,
}

impl Clone for NlFamily {
    fn clone(&self) -> Self {
        NlFamily {
            mean_spec: self.mean_spec.clone(),
            log_var_spec: self.log_var_spec.clone(),
            saturations: AtomicU64::new(self.saturations.load(Ordering::Relaxed)),
        }
    }
}

impl NlFamily {
    pub fn new(mean_spec: MlpSpec, log_var_spec: MlpSpec) -> Result<Self, ModelError> {
        if mean_spec.input_size() != log_var_spec.input_size() {
            return Err(ModelError::Params(
                "mean and log-variance nets must share the latent input size".into(),
            ));
        }
        if log_var_spec.output_size() != 1 {
            return Err(ModelError::Params(
                "log-variance net must produce a single scalar".into(),
            ));
        }
        Ok(NlFamily {
            mean_spec,
            log_var_spec,
            saturations: AtomicU64::new(0),
        })
    }

    pub fn mean_spec(&self) -> &MlpSpec {
        &self.mean_spec
    }

    pub fn log_var_spec(&self) -> &MlpSpec {
        &self.log_var_spec
    }

    /// Number of clamp saturations observed so far.
    pub fn saturation_count(&self) -> u64 {
        self.saturations.load(Ordering::Relaxed)
    }

    pub fn reset_saturation_count(&self) {
        self.saturations.store(0, Ordering::Relaxed);
    }

    /// Random initialization of both nets from one stream.
    pub fn init(&self, rng: &mut RngStream) -> Vector {
        let mean = init_params(&self.mean_spec, rng);
        let log_var = init_params(&self.log_var_spec, rng);
        self.pack(&NonlinearGaussianModel {
            mean_net: mean,
            log_var_net: log_var,
        })
    }

    pub fn pack(&self, model: &NonlinearGaussianModel) -> Vector {
        assert_eq!(model.mean_net.spec(), &self.mean_spec);
        assert_eq!(model.log_var_net.spec(), &self.log_var_spec);
        let m = model.mean_net.values();
        let v = model.log_var_net.values();
        let mut theta = Vector::zeros(m.len() + v.len());
        theta.rows_mut(0, m.len()).copy_from(m);
        theta.rows_mut(m.len(), v.len()).copy_from(v);
        theta
    }

    pub fn unpack(&self, theta: &Vector) -> Result<NonlinearGaussianModel, ModelError> {
        let (ml, vl) = (self.mean_spec.param_len(), self.log_var_spec.param_len());
        if theta.len() != ml + vl {
            return Err(ModelError::Params(format!(
                "expected {} parameters, got {}",
                ml + vl,
                theta.len()
            )));
        }
        Ok(NonlinearGaussianModel {
            mean_net: MlpParams::new(self.mean_spec.clone(), theta.rows(0, ml).into_owned())?,
            log_var_net: MlpParams::new(self.log_var_spec.clone(), theta.rows(ml, vl).into_owned())?,
        })
    }

    /// Decoder outputs (μ_θ(z), clamped log σ²_θ(z)).
    fn decode(&self, model: &NonlinearGaussianModel, z: &Vector) -> (Vector, f64, bool) {
        let mean = mlp_forward(&model.mean_net, z).expect("latent dimension mismatch");
        let raw = mlp_forward(&model.log_var_net, z).expect("latent dimension mismatch")[0];
        let (log_var, saturated) = clamp_log_var(raw);
        if saturated {
            self.saturations.fetch_add(1, Ordering::Relaxed);
        }
        (mean, log_var, saturated)
    }
}

impl LatentModel for NlFamily {
    fn name(&self) -> &'static str {
        "nonlinear_gaussian"
    }

    fn data_dim(&self) -> usize {
        self.mean_spec.output_size()
    }

    fn latent_kind(&self) -> LatentKind {
        LatentKind::Continuous {
            k: self.mean_spec.input_size(),
        }
    }

    fn param_len(&self) -> usize {
        self.mean_spec.param_len() + self.log_var_spec.param_len()
    }

    fn complete_loglik(&self, theta: &Vector, x: &Vector, z: &Vector) -> f64 {
        let model = self.unpack(theta).expect("invalid parameters");
        let (mean, log_var, _) = self.decode(&model, z);
        let d = self.data_dim();
        let var = Vector::from_element(d, log_var.exp());
        let likelihood = log_pdf_gaussian_diag(x, &mean, &var).expect("clamped variance");
        let k = self.latent_len();
        let prior =
            log_pdf_gaussian_diag(z, &Vector::zeros(k), &Vector::from_element(k, 1.0)).unwrap();
        likelihood + prior
    }

    fn score_theta(&self, theta: &Vector, x: &Vector, z: &Vector) -> Result<Vector, ModelError> {
        let model = self.unpack(theta)?;
        let (mean, log_var, saturated) = self.decode(&model, z);
        let inv_var = (-log_var).exp();
        let resid = x - &mean;
        let cot_mean = &resid * inv_var;
        let (g_mean, _) = mlp_grad(&model.mean_net, z, &cot_mean)?;
        // d/d(log σ²) = −d/2 + ‖resid‖²/(2σ²); zero when the clamp is active.
        let dl_du = if saturated {
            0.0
        } else {
            -0.5 * self.data_dim() as f64 + 0.5 * resid.norm_squared() * inv_var
        };
        let (g_var, _) = mlp_grad(&model.log_var_net, z, &Vector::from_element(1, dl_du))?;
        let mut grad = Vector::zeros(self.param_len());
        grad.rows_mut(0, g_mean.len()).copy_from(&g_mean);
        grad.rows_mut(g_mean.len(), g_var.len()).copy_from(&g_var);
        Ok(grad)
    }

    fn grad_z(&self, theta: &Vector, x: &Vector, z: &Vector) -> Result<Vector, ModelError> {
        let model = self.unpack(theta)?;
        let (mean, log_var, saturated) = self.decode(&model, z);
        let inv_var = (-log_var).exp();
        let resid = x - &mean;
        let cot_mean = &resid * inv_var;
        let (_, gz_mean) = mlp_grad(&model.mean_net, z, &cot_mean)?;
        let dl_du = if saturated {
            0.0
        } else {
            -0.5 * self.data_dim() as f64 + 0.5 * resid.norm_squared() * inv_var
        };
        let (_, gz_var) = mlp_grad(&model.log_var_net, z, &Vector::from_element(1, dl_du))?;
        Ok(gz_mean + gz_var - z)
    }

    fn sample_prior(&self, _theta: &Vector, rng: &mut RngStream) -> Vector {
        rng.sample_std_normal(self.latent_len())
    }

    fn sample_decoder(&self, theta: &Vector, z: &Vector, rng: &mut RngStream) -> Vector {
        let model = self.unpack(theta).expect("invalid parameters");
        let (mean, log_var, _) = self.decode(&model, z);
        let sd = (0.5 * log_var).exp();
        mean + rng.sample_std_normal(self.data_dim()) * sd
    }
}

#[cfg(test)]
mod tests {
    use super::super::quadrature_log_marginal;
    use super::*;
    use crate::diffnet::Activation;
    use crate::numkit::{finite_diff_grad, rel_error, QuadGrid};

    fn small_family() -> NlFamily {
        NlFamily::new(
            MlpSpec::new(&[2, 4, 3], Activation::Tanh).unwrap(),
            MlpSpec::new(&[2, 3, 1], Activation::Tanh).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_reduce_to_standard_normals() {
        let family = small_family();
        let theta = Vector::zeros(family.param_len());
        let x = Vector::from_column_slice(&[0.5, -0.25, 1.0]);
        let z = Vector::from_column_slice(&[0.3, -0.7]);
        let got = family.complete_loglik(&theta, &x, &z);
        let expected = log_pdf_gaussian_diag(&x, &Vector::zeros(3), &Vector::from_element(3, 1.0))
            .unwrap()
            + log_pdf_gaussian_diag(&z, &Vector::zeros(2), &Vector::from_element(2, 1.0)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let family = small_family();
        let mut rng = RngStream::new(6, 0);
        for _ in 0..15 {
            let theta = family.init(&mut rng);
            let x = rng.sample_std_normal(3);
            let z = rng.sample_std_normal(2);
            let score = family.score_theta(&theta, &x, &z).unwrap();
            let fd = finite_diff_grad(|t| family.complete_loglik(t, &x, &z), &theta, 1e-5);
            assert!(rel_error(&score, &fd) < 1e-4, "{}", rel_error(&score, &fd));
            let gz = family.grad_z(&theta, &x, &z).unwrap();
            let fd_z = finite_diff_grad(|zz| family.complete_loglik(&theta, &x, zz), &z, 1e-5);
            assert!(rel_error(&gz, &fd_z) < 1e-4);
        }
    }

    #[test]
    fn clamp_keeps_loglik_finite_and_counts() {
        let family = small_family();
        // Huge log-variance weights force the clamp on.
        let mut theta = Vector::zeros(family.param_len());
        let ml = family.mean_spec().param_len();
        for j in ml..family.param_len() {
            theta[j] = 50.0;
        }
        family.reset_saturation_count();
        let x = Vector::from_column_slice(&[100.0, -50.0, 25.0]);
        let z = Vector::from_column_slice(&[1.0, 1.0]);
        let l = family.complete_loglik(&theta, &x, &z);
        assert!(l.is_finite());
        assert!(family.saturation_count() > 0);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let family = small_family();
        let mut rng = RngStream::new(2, 5);
        let theta = family.init(&mut rng);
        let model = family.unpack(&theta).unwrap();
        let back = family.pack(&model);
        assert_eq!(theta, back);
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        // The grid-refinement contract on a genuinely nonlinear integrand.
        let family = NlFamily::new(
            MlpSpec::new(&[1, 6, 2], Activation::Tanh).unwrap(),
            MlpSpec::new(&[1, 3, 1], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut rng = RngStream::new(40, 0);
        let theta = family.init(&mut rng);
        let x = Vector::from_column_slice(&[0.8, -0.4]);
        let coarse = quadrature_log_marginal(
            &family,
            &theta,
            &x,
            &QuadGrid::new(1, 201, -8.0, 8.0).unwrap(),
        )
        .unwrap();
        let fine = quadrature_log_marginal(
            &family,
            &theta,
            &x,
            &QuadGrid::new(1, 402, -8.0, 8.0).unwrap(),
        )
        .unwrap();
        assert!((coarse - fine).abs() < 1e-6);
    }

    #[test]
    fn rejects_vector_variance_head() {
        assert!(NlFamily::new(
            MlpSpec::new(&[2, 4, 3], Activation::Tanh).unwrap(),
            MlpSpec::new(&[2, 3, 2], Activation::Tanh).unwrap(),
        )
        .is_err());
    }
}
