//! Per-datum Gaussian mean-field variational inference: ELBO estimation,
//! reparameterized gradients in ω = (α, log β), the nested ascent scheme
//! over (θ, ω_1..n), and local-fit reference values for the amortization
//! gap.
//!
//! The variational family is q_ω(z) = N(α, diag(β²)) with β = exp(log β),
//! so positivity is unconstrained. A latent draw is reparameterized as
//! Z = α + β ⊙ ε with ε ~ N(0, I), which makes the ELBO
//!
//! ```text
//!   ELBO(θ, ω | x) = E_q[ ℓ(θ | x, Z) ] + H(q_ω)
//! ```
//!
//! differentiable along the sample path: ∇_α picks up ∇_z ℓ directly,
//! ∇_β picks up ε ⊙ ∇_z ℓ plus the entropy gradient 1/β, and the chain
//! rule to log β multiplies both β-terms by β (turning 1/β into the
//! constant 1).

use crate::models::{LatentModel, LinearGaussianModel, ModelError};
use crate::numkit::{entropy_gaussian_diag, stats, RngStream, LN_2PI};
use crate::Vector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ViError {
    #[error(transparent)]
    Model(#[from] ModelError),
    /// The ascent produced a non-finite iterate or gradient; the offending
    /// iterate is carried along for post-mortem inspection.
    #[error("variational ascent diverged at step {step}: alpha = {alpha:?}, log_beta = {log_beta:?}")]
    Diverged {
        step: usize,
        alpha: Vec<f64>,
        log_beta: Vec<f64>,
    },
}

/// Per-datum variational parameters ω = (α, log β).
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldParams {
    pub alpha: Vector,
    pub log_beta: Vector,
}

impl MeanFieldParams {
    pub fn new(alpha: Vector, log_beta: Vector) -> Self {
        assert_eq!(alpha.len(), log_beta.len(), "alpha/log_beta length mismatch");
        MeanFieldParams { alpha, log_beta }
    }

    /// ω = (0, 0): the standard normal N(0, I_k).
    pub fn standard(k: usize) -> Self {
        MeanFieldParams::new(Vector::zeros(k), Vector::zeros(k))
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// β = exp(log β), strictly positive by construction.
    pub fn stddev(&self) -> Vector {
        self.log_beta.map(f64::exp)
    }

    /// Flat [α; log β] layout used by finite-difference checks.
    pub fn pack(&self) -> Vector {
        let k = self.dim();
        let mut v = Vector::zeros(2 * k);
        v.rows_mut(0, k).copy_from(&self.alpha);
        v.rows_mut(k, k).copy_from(&self.log_beta);
        v
    }

    pub fn unpack(packed: &Vector) -> Self {
        assert!(packed.len() % 2 == 0, "packed mean-field params have even length");
        let k = packed.len() / 2;
        MeanFieldParams::new(
            packed.rows(0, k).into_owned(),
            packed.rows(k, k).into_owned(),
        )
    }

    pub fn entropy(&self) -> f64 {
        entropy_gaussian_diag(&self.stddev()).expect("stddev positive by construction")
    }
}

fn reparam_draws(
    params: &MeanFieldParams,
    m: usize,
    rng: &mut RngStream,
) -> Vec<(Vector, Vector)> {
    let beta = params.stddev();
    (0..m)
        .map(|_| {
            let eps = rng.sample_std_normal(params.dim());
            let z = &params.alpha + beta.component_mul(&eps);
            (z, eps)
        })
        .collect()
}

/// Per-sample ELBO values ℓ(θ|x, α+β⊙ε^(m)) + H(q_ω); their mean is the
/// ELBO estimate and their spread gives its Monte Carlo standard error.
pub fn elbo_samples(
    model: &dyn LatentModel,
    theta: &Vector,
    params: &MeanFieldParams,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> Vec<f64> {
    assert!(m >= 1, "elbo_samples requires M >= 1");
    let entropy = params.entropy();
    reparam_draws(params, m, rng)
        .iter()
        .map(|(z, _)| model.complete_loglik(theta, x, z) + entropy)
        .collect()
}

/// (1/M) Σ_m ℓ(θ|x, α+β⊙ε^(m)) + entropy_gaussian_diag(β).
pub fn elbo_estimate(
    model: &dyn LatentModel,
    theta: &Vector,
    params: &MeanFieldParams,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> f64 {
    stats::mean(&elbo_samples(model, theta, params, x, m, rng))
}

/// (1/M) Σ_m s(θ | x, Z̃^(m)) with Z̃^(m) ~ q_ω: the Monte Carlo estimate
/// of ∇_θ ELBO via the complete-data score function.
pub fn grad_theta_elbo(
    model: &dyn LatentModel,
    theta: &Vector,
    params: &MeanFieldParams,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> Result<Vector, ModelError> {
    assert!(m >= 1, "grad_theta_elbo requires M >= 1");
    let mut acc = Vector::zeros(model.param_len());
    for (z, _) in reparam_draws(params, m, rng) {
        acc += model.score_theta(theta, x, &z)?;
    }
    Ok(acc / m as f64)
}

/// Pathwise gradient of the ELBO in ω:
/// grad_alpha = (1/M) Σ ∇_z ℓ, and
/// grad_log_beta = β ⊙ [(1/M) Σ ε ⊙ ∇_z ℓ] + 1 (the entropy gradient 1/β
/// chained through β = exp(log β)).
pub fn grad_omega_elbo(
    model: &dyn LatentModel,
    theta: &Vector,
    params: &MeanFieldParams,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> Result<(Vector, Vector), ModelError> {
    assert!(m >= 1, "grad_omega_elbo requires M >= 1");
    let k = params.dim();
    let beta = params.stddev();
    let mut grad_alpha = Vector::zeros(k);
    let mut eps_weighted = Vector::zeros(k);
    for (z, eps) in reparam_draws(params, m, rng) {
        let gz = model.grad_z(theta, x, &z)?;
        grad_alpha += &gz;
        eps_weighted += eps.component_mul(&gz);
    }
    grad_alpha /= m as f64;
    eps_weighted /= m as f64;
    let grad_log_beta = beta.component_mul(&eps_weighted).add_scalar(1.0);
    Ok((grad_alpha, grad_log_beta))
}

/// Ascent direction policy: fixed-step plain gradient ascent (the default
/// everywhere) or an adaptive-moment direction, kept available but off in
/// all shipped runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AscentMode {
    Fixed,
    Adam,
}

/// Adaptive-moment rescaling of a gradient sequence (maximization form:
/// the returned direction is added, scaled by the step size).
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vector,
    v: Vector,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam {
            m: Vector::zeros(dim),
            v: Vector::zeros(dim),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn direction(&mut self, grad: &Vector) -> Vector {
        self.t += 1;
        self.m = &self.m * self.beta1 + grad * (1.0 - self.beta1);
        self.v = &self.v * self.beta2 + grad.component_mul(grad) * (1.0 - self.beta2);
        let m_hat = &self.m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = &self.v / (1.0 - self.beta2.powi(self.t as i32));
        m_hat.zip_map(&v_hat, |mh, vh| mh / (vh.sqrt() + self.eps))
    }
}

fn check_finite(
    step: usize,
    params: &MeanFieldParams,
    grads: &[&Vector],
) -> Result<(), ViError> {
    let bad_grad = grads.iter().any(|g| g.iter().any(|v| !v.is_finite()));
    let bad_iter = params.alpha.iter().chain(params.log_beta.iter()).any(|v| !v.is_finite());
    if bad_grad || bad_iter {
        return Err(ViError::Diverged {
            step,
            alpha: params.alpha.iter().cloned().collect(),
            log_beta: params.log_beta.iter().cloned().collect(),
        });
    }
    Ok(())
}

/// `fit_local` with an explicit ascent mode.
pub fn fit_local_with(
    mode: AscentMode,
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
    init: &MeanFieldParams,
    steps: usize,
    gamma: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<MeanFieldParams, ViError> {
    assert!(steps >= 1, "fit_local requires steps >= 1");
    let k = init.dim();
    let mut params = init.clone();
    let mut opt = match mode {
        AscentMode::Adam => Some((Adam::new(k), Adam::new(k))),
        AscentMode::Fixed => None,
    };
    for step in 0..steps {
        let (ga, glb) = grad_omega_elbo(model, theta, &params, x, m, rng)?;
        check_finite(step, &params, &[&ga, &glb])?;
        let (da, dlb) = match &mut opt {
            Some((oa, ob)) => (oa.direction(&ga), ob.direction(&glb)),
            None => (ga, glb),
        };
        params.alpha += da * gamma;
        params.log_beta += dlb * gamma;
        check_finite(step, &params, &[])?;
    }
    Ok(params)
}

/// Gradient ascent on ω for a single datum: `steps` updates of
/// (α, log β) with step size `gamma` and `m` fresh reparameterized draws
/// per step. Returns the final iterate, an approximation of the local
/// optimum ω*(x; θ).
pub fn fit_local(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
    init: &MeanFieldParams,
    steps: usize,
    gamma: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<MeanFieldParams, ViError> {
    fit_local_with(AscentMode::Fixed, model, theta, x, init, steps, gamma, m, rng)
}

/// Settings for the nested scheme: per-outer-iteration local refresh
/// budgets (a long first pass, short warm-started passes after), fixed
/// step sizes, and small-M training / large-M evaluation sample counts.
#[derive(Clone, Copy, Debug)]
pub struct ViConfig {
    pub outer_iters: usize,
    pub inner_first: usize,
    pub inner_rest: usize,
    pub gamma_theta: f64,
    pub gamma_omega: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub adaptive: bool,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            outer_iters: 100,
            inner_first: 200,
            inner_rest: 25,
            gamma_theta: 1e-2,
            gamma_omega: 1e-2,
            train_samples: 8,
            eval_samples: 256,
            adaptive: false,
        }
    }
}

/// Result of [`fit_vi`]: the final θ, one ω per data row, and the total
/// ELBO (evaluated with `eval_samples` draws) after each outer iteration.
#[derive(Clone, Debug)]
pub struct ViState {
    pub theta: Vector,
    pub locals: Vec<MeanFieldParams>,
    pub elbo_trace: Vec<f64>,
}

/// Nested variational ascent: each outer iteration refreshes every ω_i by
/// `fit_local` (warm-started after the first pass), then takes one global
/// θ step along Σ_i ∇_θ ELBO(θ, ω_i | x_i).
///
/// Streams are derived per (iteration, datum) from the caller's stream, so
/// the local refreshes are order-independent; the θ update consumes an
/// ordered sum of per-datum gradients.
pub fn fit_vi(
    model: &dyn LatentModel,
    data: &[Vector],
    theta0: &Vector,
    config: &ViConfig,
    rng: &mut RngStream,
) -> Result<ViState, ViError> {
    let n = data.len();
    let k = model.latent_len();
    let mode = if config.adaptive { AscentMode::Adam } else { AscentMode::Fixed };
    let mut theta = theta0.clone();
    let mut locals = vec![MeanFieldParams::standard(k); n];
    let mut trace = Vec::with_capacity(config.outer_iters);
    let mut theta_opt = config.adaptive.then(|| Adam::new(theta.len()));

    for t in 0..config.outer_iters {
        let outer = rng.substream(t as u64);
        let steps = if t == 0 { config.inner_first } else { config.inner_rest };
        for (i, x) in data.iter().enumerate() {
            let mut local_rng = outer.substream(i as u64);
            let refreshed = fit_local_with(
                mode,
                model,
                &theta,
                x,
                &locals[i],
                steps,
                config.gamma_omega,
                config.train_samples,
                &mut local_rng,
            )?;
            locals[i] = refreshed;
        }
        let mut grad = Vector::zeros(theta.len());
        let mut grad_rng = outer.substream(n as u64 + 1);
        for (i, x) in data.iter().enumerate() {
            grad += grad_theta_elbo(model, &theta, &locals[i], x, config.train_samples, &mut grad_rng)?;
        }
        let direction = match &mut theta_opt {
            Some(opt) => opt.direction(&grad),
            None => grad,
        };
        theta += direction * config.gamma_theta;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ViError::Diverged {
                step: t,
                alpha: theta.iter().cloned().collect(),
                log_beta: Vec::new(),
            });
        }
        let mut eval_rng = outer.substream(n as u64 + 2);
        let total: f64 = data
            .iter()
            .zip(&locals)
            .map(|(x, w)| elbo_estimate(model, &theta, w, x, config.eval_samples, &mut eval_rng))
            .sum();
        trace.push(total);
    }
    Ok(ViState {
        theta,
        locals,
        elbo_trace: trace,
    })
}

/// Closed-form ELBO for the linear Gaussian model under q = N(α, diag β²):
/// the expectation of the quadratic complete log-likelihood is available
/// analytically, so no Monte Carlo error enters.
pub fn elbo_analytic_lg(
    model: &LinearGaussianModel,
    params: &MeanFieldParams,
    x: &Vector,
) -> f64 {
    let beta2 = params.stddev().map(|b| b * b);
    let k = model.latent_dim() as f64;
    let d = model.data_dim() as f64;
    let prior = -0.5 * k * LN_2PI - 0.5 * (params.alpha.norm_squared() + beta2.sum());
    let resid = x - model.offset() - model.loading() * &params.alpha;
    let spread: f64 = (0..model.latent_dim())
        .map(|j| beta2[j] * model.loading().column(j).norm_squared())
        .sum();
    let lik = -0.5 * d * (LN_2PI + model.noise_var().ln())
        - (resid.norm_squared() + spread) / (2.0 * model.noise_var());
    prior + lik + params.entropy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lg_log_marginal, lg_posterior, LatentKind, LgFamily, NlFamily};
    use crate::numkit::{finite_diff_grad, kl_gaussian_dense, rel_error};
    use crate::{Matrix, Vector};

    fn lg_d2k1() -> (LgFamily, LinearGaussianModel, Vector) {
        let family = LgFamily::new(2, 1);
        let model = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[1.0, -0.5]),
            Vector::from_vec(vec![0.3, -0.2]),
            0.5,
        )
        .unwrap();
        let theta = family.pack(&model);
        (family, model, theta)
    }

    /// Exact posterior as mean-field parameters (valid when k = 1).
    fn lg_posterior_omega(model: &LinearGaussianModel, x: &Vector) -> MeanFieldParams {
        let post = lg_posterior(model, x).unwrap();
        let alpha = post.mean().clone();
        let log_beta = Vector::from_vec(vec![post.cov()[(0, 0)].sqrt().ln()]);
        MeanFieldParams::new(alpha, log_beta)
    }

    #[test]
    fn elbo_same_seed_prefix_matches_smaller_m() {
        let (family, _, theta) = lg_d2k1();
        let omega = MeanFieldParams::new(
            Vector::from_vec(vec![0.4]),
            Vector::from_vec(vec![-0.3]),
        );
        let x = Vector::from_vec(vec![0.9, -0.7]);
        let rng = RngStream::new(5, 1);
        let s4 = elbo_samples(&family, &theta, &omega, &x, 4, &mut rng.clone());
        let s2 = elbo_samples(&family, &theta, &omega, &x, 2, &mut rng.clone());
        assert_eq!(&s4[..2], &s2[..]);
        let est = elbo_estimate(&family, &theta, &omega, &x, 4, &mut rng.clone());
        assert!((est - stats::mean(&s4)).abs() < 1e-15);
    }

    #[test]
    fn elbo_tight_at_exact_posterior() {
        let (family, model, theta) = lg_d2k1();
        let x = Vector::from_vec(vec![1.1, 0.2]);
        let omega = lg_posterior_omega(&model, &x);
        let mut rng = RngStream::new(11, 0);
        let samples = elbo_samples(&family, &theta, &omega, &x, 4096, &mut rng);
        let est = stats::mean(&samples);
        let se = stats::se_mean(&samples);
        let marginal = lg_log_marginal(&model, &x).unwrap();
        assert!(
            (est - marginal).abs() <= 3.0 * se,
            "elbo {est} vs marginal {marginal} (se {se})"
        );
    }

    #[test]
    fn elbo_stays_below_marginal() {
        let (family, model, theta) = lg_d2k1();
        let mut rng = RngStream::new(13, 0);
        let x = Vector::from_vec(vec![-0.4, 0.8]);
        let marginal = lg_log_marginal(&model, &x).unwrap();
        for trial in 0..20 {
            let omega = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.5,
            );
            let samples =
                elbo_samples(&family, &theta, &omega, &x, 256, &mut rng.substream(trial));
            let est = stats::mean(&samples);
            let se = stats::se_mean(&samples);
            assert!(est <= marginal + 3.0 * se, "trial {trial}: {est} > {marginal}");
        }
    }

    #[test]
    fn tightness_identity_closed_form() {
        let (_, model, _) = lg_d2k1();
        let x = Vector::from_vec(vec![0.6, -0.9]);
        let mut rng = RngStream::new(17, 0);
        for _ in 0..25 {
            let omega = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.4,
            );
            let post = lg_posterior(&model, &x).unwrap();
            let beta2 = omega.stddev().map(|b| b * b);
            let kl = kl_gaussian_dense(
                &omega.alpha,
                &Matrix::from_diagonal(&beta2),
                post.mean(),
                post.cov(),
            )
            .unwrap();
            let elbo = elbo_analytic_lg(&model, &omega, &x);
            let marginal = lg_log_marginal(&model, &x).unwrap();
            assert!(
                (elbo - (marginal - kl)).abs() < 1e-10,
                "elbo {elbo} vs {} - {kl}",
                marginal
            );
        }
    }

    #[test]
    fn grad_theta_matches_closed_form_expectation() {
        let (family, model, theta) = lg_d2k1();
        let x = Vector::from_vec(vec![0.7, -1.1]);
        let omega = MeanFieldParams::new(
            Vector::from_vec(vec![0.3]),
            Vector::from_vec(vec![-0.2]),
        );
        let m = 10_000;
        let rng = RngStream::new(19, 0);

        // Manual replay of the same draws for per-coordinate SEs.
        let beta = omega.stddev();
        let mut replay = rng.clone();
        let mut scores: Vec<Vector> = Vec::with_capacity(m);
        for _ in 0..m {
            let eps = replay.sample_std_normal(1);
            let z = &omega.alpha + beta.component_mul(&eps);
            scores.push(family.score_theta(&theta, &x, &z).unwrap());
        }
        let est = grad_theta_elbo(&family, &theta, &omega, &x, m, &mut rng.clone()).unwrap();
        let manual = scores.iter().fold(Vector::zeros(5), |a, s| a + s) / m as f64;
        assert!((&est - &manual).norm() < 1e-12, "wiring mismatch");

        // Closed-form E_q[s(θ|x,Z)] for the quadratic model.
        let alpha = &omega.alpha;
        let b2 = beta[0] * beta[0];
        let w = model.loading();
        let resid_mean = &x - model.offset() - w * alpha;
        let s2 = model.noise_var();
        let escore_w = ((&x - model.offset()) * alpha.transpose()
            - w * (alpha * alpha.transpose() + Matrix::from_diagonal(&Vector::from_vec(vec![b2]))))
            / s2;
        let escore_mu = &resid_mean / s2;
        let e_resid2 = resid_mean.norm_squared() + b2 * w.column(0).norm_squared();
        let escore_ls = -1.0 + e_resid2 / (2.0 * s2);
        let mut expected = Vector::zeros(5);
        expected[0] = escore_w[(0, 0)];
        expected[1] = escore_w[(1, 0)];
        expected[2] = escore_mu[0];
        expected[3] = escore_mu[1];
        expected[4] = escore_ls;

        for j in 0..5 {
            let coord: Vec<f64> = scores.iter().map(|s| s[j]).collect();
            let se = stats::se_mean(&coord);
            assert!(
                (est[j] - expected[j]).abs() <= 3.0 * se,
                "coord {j}: {} vs {} (se {se})",
                est[j],
                expected[j]
            );
        }
    }

    /// A latent model with no parameters and flat complete log-likelihood;
    /// its score is empty and ∇_z ℓ ≡ 0.
    struct FlatModel {
        k: usize,
    }

    impl LatentModel for FlatModel {
        fn name(&self) -> &'static str {
            "flat"
        }
        fn data_dim(&self) -> usize {
            1
        }
        fn latent_kind(&self) -> LatentKind {
            LatentKind::Continuous { k: self.k }
        }
        fn param_len(&self) -> usize {
            0
        }
        fn complete_loglik(&self, _: &Vector, _: &Vector, _: &Vector) -> f64 {
            0.0
        }
        fn score_theta(&self, _: &Vector, _: &Vector, _: &Vector) -> Result<Vector, ModelError> {
            Ok(Vector::zeros(0))
        }
        fn grad_z(&self, _: &Vector, _: &Vector, z: &Vector) -> Result<Vector, ModelError> {
            Ok(Vector::zeros(z.len()))
        }
        fn sample_prior(&self, _: &Vector, rng: &mut RngStream) -> Vector {
            rng.sample_std_normal(self.k)
        }
        fn sample_decoder(&self, _: &Vector, _: &Vector, rng: &mut RngStream) -> Vector {
            rng.sample_std_normal(1)
        }
    }

    #[test]
    fn zero_score_model_gives_zero_theta_gradient() {
        let model = FlatModel { k: 2 };
        let omega = MeanFieldParams::standard(2);
        let mut rng = RngStream::new(23, 0);
        let g = grad_theta_elbo(
            &model,
            &Vector::zeros(0),
            &omega,
            &Vector::from_vec(vec![0.0]),
            16,
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.len(), 0);
    }

    #[test]
    fn entropy_only_log_beta_gradient_is_ones() {
        let model = FlatModel { k: 3 };
        let omega = MeanFieldParams::new(
            Vector::from_vec(vec![0.5, -1.0, 2.0]),
            Vector::from_vec(vec![0.3, 0.0, -0.7]),
        );
        let mut rng = RngStream::new(29, 0);
        let (ga, glb) = grad_omega_elbo(
            &model,
            &Vector::zeros(0),
            &omega,
            &Vector::from_vec(vec![0.0]),
            5,
            &mut rng,
        )
        .unwrap();
        assert!(ga.norm() == 0.0);
        for j in 0..3 {
            assert!((glb[j] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_omega_matches_crn_finite_differences() {
        use crate::diffnet::{Activation, MlpSpec};
        let family = NlFamily::new(
            MlpSpec::new(&[1, 4, 2], Activation::Tanh).unwrap(),
            MlpSpec::new(&[1, 3, 1], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut init_rng = RngStream::new(31, 0);
        let theta = family.init(&mut init_rng);
        let x = Vector::from_vec(vec![0.8, -0.4]);
        let omega = MeanFieldParams::new(
            Vector::from_vec(vec![0.25]),
            Vector::from_vec(vec![-0.15]),
        );
        let base = RngStream::new(37, 5);
        let (ga, glb) = grad_omega_elbo(&family, &theta, &omega, &x, 3, &mut base.clone()).unwrap();
        let mut analytic = Vector::zeros(2);
        analytic[0] = ga[0];
        analytic[1] = glb[0];
        let f = |w: &Vector| {
            let params = MeanFieldParams::unpack(w);
            elbo_estimate(&family, &theta, &params, &x, 3, &mut base.clone())
        };
        let fd = finite_diff_grad(f, &omega.pack(), 1e-5);
        assert!(
            rel_error(&analytic, &fd) < 1e-4,
            "analytic {analytic:?} vs fd {fd:?}"
        );
    }

    #[test]
    fn grad_omega_stationary_at_exact_posterior() {
        let (family, model, theta) = lg_d2k1();
        let x = Vector::from_vec(vec![0.5, -0.3]);
        let omega = lg_posterior_omega(&model, &x);
        let m = 1024;
        let rng = RngStream::new(41, 0);

        // Replay draws for per-coordinate standard errors.
        let beta = omega.stddev();
        let mut replay = rng.clone();
        let mut ga_samples = Vec::with_capacity(m);
        let mut glb_samples = Vec::with_capacity(m);
        for _ in 0..m {
            let eps = replay.sample_std_normal(1);
            let z = &omega.alpha + beta.component_mul(&eps);
            let gz = family.grad_z(&theta, &x, &z).unwrap();
            ga_samples.push(gz[0]);
            glb_samples.push(beta[0] * eps[0] * gz[0] + 1.0);
        }
        let (ga, glb) =
            grad_omega_elbo(&family, &theta, &omega, &x, m, &mut rng.clone()).unwrap();
        assert!((ga[0] - stats::mean(&ga_samples)).abs() < 1e-12);
        assert!((glb[0] - stats::mean(&glb_samples)).abs() < 1e-12);
        assert!(ga[0].abs() <= 3.0 * stats::se_mean(&ga_samples), "ga {}", ga[0]);
        assert!(glb[0].abs() <= 3.0 * stats::se_mean(&glb_samples), "glb {}", glb[0]);
    }

    #[test]
    fn grad_alpha_estimates_are_unbiased() {
        let (family, model, theta) = lg_d2k1();
        let x = Vector::from_vec(vec![1.0, 0.1]);
        let omega = MeanFieldParams::new(
            Vector::from_vec(vec![0.2]),
            Vector::from_vec(vec![-0.4]),
        );
        // Analytic ∇_α ELBO = -α + Wᵀ(x - μ - Wα)/σ².
        let resid = &x - model.offset() - model.loading() * &omega.alpha;
        let expected =
            -&omega.alpha + model.loading().transpose() * resid / model.noise_var();
        let mut rng = RngStream::new(43, 0);
        let reps = 10_000;
        let mut draws = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (ga, _) = grad_omega_elbo(&family, &theta, &omega, &x, 1, &mut rng).unwrap();
            draws.push(ga[0]);
        }
        let se = stats::se_mean(&draws);
        assert!(
            (stats::mean(&draws) - expected[0]).abs() <= 3.0 * se,
            "mean {} vs {} (se {se})",
            stats::mean(&draws),
            expected[0]
        );
    }

    #[test]
    fn fit_local_recovers_lg_posterior() {
        let family = LgFamily::new(3, 1);
        let model = LinearGaussianModel::new(
            Matrix::from_row_slice(3, 1, &[1.0, -0.5, 0.5]),
            Vector::from_vec(vec![0.2, 0.0, -0.1]),
            0.5,
        )
        .unwrap();
        let theta = family.pack(&model);
        let x = Vector::from_vec(vec![0.9, -0.6, 0.3]);
        let post = lg_posterior(&model, &x).unwrap();
        let mut rng = RngStream::new(5, 0);
        let fitted = fit_local(
            &family,
            &theta,
            &x,
            &MeanFieldParams::standard(1),
            500,
            1e-2,
            64,
            &mut rng,
        )
        .unwrap();
        let target_sd = post.cov()[(0, 0)].sqrt();
        assert!(
            (fitted.alpha[0] - post.mean()[0]).abs() < 1e-2,
            "alpha {} vs {}",
            fitted.alpha[0],
            post.mean()[0]
        );
        assert!(
            (fitted.stddev()[0] - target_sd).abs() < 1e-2,
            "beta {} vs {target_sd}",
            fitted.stddev()[0]
        );
    }

    #[test]
    fn fit_local_zero_step_size_returns_init() {
        let (family, _, theta) = lg_d2k1();
        let x = Vector::from_vec(vec![0.4, 0.4]);
        let init = MeanFieldParams::new(
            Vector::from_vec(vec![0.7]),
            Vector::from_vec(vec![-0.3]),
        );
        let mut rng = RngStream::new(53, 0);
        let out = fit_local(&family, &theta, &x, &init, 10, 0.0, 4, &mut rng).unwrap();
        assert_eq!(out, init);
    }

    /// ∇_z ℓ overflows immediately, driving the iterate to infinity.
    struct ExplodingModel;

    impl LatentModel for ExplodingModel {
        fn name(&self) -> &'static str {
            "exploding"
        }
        fn data_dim(&self) -> usize {
            1
        }
        fn latent_kind(&self) -> LatentKind {
            LatentKind::Continuous { k: 1 }
        }
        fn param_len(&self) -> usize {
            0
        }
        fn complete_loglik(&self, _: &Vector, _: &Vector, _: &Vector) -> f64 {
            0.0
        }
        fn grad_z(&self, _: &Vector, _: &Vector, _: &Vector) -> Result<Vector, ModelError> {
            Ok(Vector::from_vec(vec![f64::INFINITY]))
        }
        fn sample_prior(&self, _: &Vector, rng: &mut RngStream) -> Vector {
            rng.sample_std_normal(1)
        }
        fn sample_decoder(&self, _: &Vector, _: &Vector, rng: &mut RngStream) -> Vector {
            rng.sample_std_normal(1)
        }
    }

    #[test]
    fn fit_local_divergence_reports_iterate() {
        let mut rng = RngStream::new(59, 0);
        let err = fit_local(
            &ExplodingModel,
            &Vector::zeros(0),
            &Vector::from_vec(vec![0.0]),
            &MeanFieldParams::standard(1),
            5,
            1e-2,
            2,
            &mut rng,
        )
        .unwrap_err();
        match err {
            ViError::Diverged { step, alpha, .. } => {
                assert_eq!(step, 0);
                assert_eq!(alpha.len(), 1);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn warm_start_converges_faster_than_cold_start() {
        let family = LgFamily::new(2, 1);
        let model = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.9, 0.7]),
            Vector::zeros(2),
            0.4,
        )
        .unwrap();
        let theta = family.pack(&model);
        let x = Vector::from_vec(vec![1.2, -0.5]);
        let mut rng = RngStream::new(61, 0);
        let settled = fit_local(
            &family,
            &theta,
            &x,
            &MeanFieldParams::standard(1),
            800,
            1e-2,
            64,
            &mut rng,
        )
        .unwrap();
        let eval_rng = RngStream::new(61, 99);
        let target = elbo_estimate(&family, &theta, &settled, &x, 2048, &mut eval_rng.clone());

        // Slightly perturbed model: the old optimum is a warm start.
        let nudged = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.91, 0.69]),
            Vector::from_vec(vec![0.01, -0.01]),
            0.41,
        )
        .unwrap();
        let theta2 = family.pack(&nudged);
        let steps_to_target = |init: &MeanFieldParams| -> usize {
            for steps in [5, 10, 25, 50, 100, 200, 400, 800] {
                let out = fit_local(
                    &family,
                    &theta2,
                    &x,
                    init,
                    steps,
                    1e-2,
                    64,
                    &mut RngStream::new(61, 7),
                )
                .unwrap();
                let e = elbo_estimate(&family, &theta2, &out, &x, 2048, &mut eval_rng.clone());
                if e >= target - 0.05 {
                    return steps;
                }
            }
            usize::MAX
        };
        let warm = steps_to_target(&settled);
        let cold = steps_to_target(&MeanFieldParams::standard(1));
        // Informational bound: the measured ratio is printed by the test
        // harness on failure; the hard assertion is only that warm starts
        // are no slower.
        assert!(warm <= cold, "warm {warm} vs cold {cold}");
        assert!(warm <= 25, "warm start took {warm} steps");
    }

    #[test]
    fn fit_vi_trace_grows_and_n1_reduces_to_single_datum_updates() {
        let family = LgFamily::new(2, 1);
        let truth = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[1.0, -0.6]),
            Vector::from_vec(vec![0.2, -0.1]),
            0.5,
        )
        .unwrap();
        let theta_truth = family.pack(&truth);
        let mut data_rng = RngStream::new(67, 0);
        let data: Vec<Vector> = (0..6)
            .map(|_| {
                let z = family.sample_prior(&theta_truth, &mut data_rng);
                family.sample_decoder(&theta_truth, &z, &mut data_rng)
            })
            .collect();
        let start = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.5, 0.5]),
            Vector::zeros(2),
            1.0,
        )
        .unwrap();
        let theta0 = family.pack(&start);
        let config = ViConfig {
            outer_iters: 8,
            ..ViConfig::default()
        };
        let mut rng = RngStream::new(71, 0);
        let state = fit_vi(&family, &data, &theta0, &config, &mut rng).unwrap();
        assert_eq!(state.elbo_trace.len(), 8);
        assert_eq!(state.locals.len(), 6);
        assert!(state.elbo_trace[7] > state.elbo_trace[0]);

        // n = 1: the driver is exactly one fit_local plus one θ step per
        // outer iteration, under the documented stream discipline.
        let single = vec![data[0].clone()];
        let config1 = ViConfig {
            outer_iters: 2,
            ..ViConfig::default()
        };
        let base = RngStream::new(73, 0);
        let state1 = fit_vi(&family, &single, &theta0, &config1, &mut base.clone()).unwrap();
        let mut theta = theta0.clone();
        let mut local = MeanFieldParams::standard(1);
        for t in 0..2u64 {
            let outer = base.substream(t);
            let steps = if t == 0 { config1.inner_first } else { config1.inner_rest };
            local = fit_local(
                &family,
                &theta,
                &single[0],
                &local,
                steps,
                config1.gamma_omega,
                config1.train_samples,
                &mut outer.substream(0),
            )
            .unwrap();
            let g = grad_theta_elbo(
                &family,
                &theta,
                &local,
                &single[0],
                config1.train_samples,
                &mut outer.substream(2),
            )
            .unwrap();
            theta += g * config1.gamma_theta;
        }
        assert!((&state1.theta - &theta).norm() < 1e-12);
        assert!((&state1.locals[0].alpha - &local.alpha).norm() < 1e-12);
    }

    #[test]
    fn fit_vi_smoothed_trace_is_monotone() {
        let family = LgFamily::new(2, 1);
        let truth = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[1.1, -0.4]),
            Vector::from_vec(vec![0.0, 0.3]),
            0.6,
        )
        .unwrap();
        let theta_truth = family.pack(&truth);
        let mut data_rng = RngStream::new(79, 0);
        let data: Vec<Vector> = (0..12)
            .map(|_| {
                let z = family.sample_prior(&theta_truth, &mut data_rng);
                family.sample_decoder(&theta_truth, &z, &mut data_rng)
            })
            .collect();
        let start = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.4, 0.4]),
            Vector::zeros(2),
            1.5,
        )
        .unwrap();
        let config = ViConfig {
            outer_iters: 40,
            ..ViConfig::default()
        };
        let mut rng = RngStream::new(83, 0);
        let state = fit_vi(&family, &data, &family.pack(&start), &config, &mut rng).unwrap();
        let smoothed: Vec<f64> = state
            .elbo_trace
            .windows(5)
            .map(|w| stats::mean(w))
            .collect();
        for t in 1..smoothed.len() {
            assert!(
                smoothed[t] >= smoothed[t - 1] - 0.05,
                "smoothed trace fell at {t}: {} -> {}",
                smoothed[t - 1],
                smoothed[t]
            );
        }
    }

    #[test]
    fn fit_vi_recovers_lg_mle_through_marginal_covariance() {
        let family = LgFamily::new(2, 1);
        let truth = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[1.0, -0.7]),
            Vector::from_vec(vec![0.5, -0.2]),
            0.4,
        )
        .unwrap();
        let theta_truth = family.pack(&truth);
        let mut data_rng = RngStream::new(89, 0);
        let n = 40;
        let data: Vec<Vector> = (0..n)
            .map(|_| {
                let z = family.sample_prior(&theta_truth, &mut data_rng);
                family.sample_decoder(&theta_truth, &z, &mut data_rng)
            })
            .collect();

        // Closed-form MLE for the k=1 factor model: principal eigenpair of
        // the sample covariance, noise variance from the discarded one.
        let mut xbar = Vector::zeros(2);
        for x in &data {
            xbar += x;
        }
        xbar /= n as f64;
        let mut cov = Matrix::zeros(2, 2);
        for x in &data {
            let c = x - &xbar;
            cov += &c * c.transpose();
        }
        cov /= n as f64;
        let eig = cov.clone().symmetric_eigen();
        let (hi, lo) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let lam1 = eig.eigenvalues[hi];
        let sigma2_mle = eig.eigenvalues[lo];
        let u = eig.eigenvectors.column(hi).into_owned();
        let wwt_mle = &u * u.transpose() * (lam1 - sigma2_mle);

        let start = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.8, 0.1]),
            Vector::zeros(2),
            1.0,
        )
        .unwrap();
        let config = ViConfig {
            outer_iters: 300,
            train_samples: 128,
            eval_samples: 64,
            ..ViConfig::default()
        };
        let mut rng = RngStream::new(97, 0);
        let state = fit_vi(&family, &data, &family.pack(&start), &config, &mut rng).unwrap();
        let fitted = family.unpack(&state.theta).unwrap();
        let wwt = fitted.loading() * fitted.loading().transpose();
        let diff = (&wwt - &wwt_mle).norm();
        assert!(diff < 5e-2, "WWᵀ error {diff}");
        assert!(
            (fitted.noise_var() - sigma2_mle).abs() < 5e-2,
            "sigma2 {} vs {sigma2_mle}",
            fitted.noise_var()
        );
        assert!((fitted.offset() - &xbar).norm() < 5e-2);
    }
}
