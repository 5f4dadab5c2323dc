//! Registered self-checks behind the `verify` subcommand, plus the
//! gradient audit behind `gradcheck`.
//!
//! Each check exercises one invariant the rest of the crate leans on and
//! reports a single measured value against a single bound. The check
//! names are frozen in per-suite tables so callers can rely on `verify`
//! emitting exactly one line per registered invariant, in order.

use super::dataset::{gen_data, DataSpec};
use super::HarnessError;
use crate::amortized::{amortization_gap_report, batch_elbo_a, encode, grad_joint, Encoder};
use crate::ddm::{
    elbo_refined, forward_jump, forward_jump_with, forward_step, grad_simple_loss,
    grad_trajectory, mu_from_psi, posterior_params, schedule_make, simple_loss,
    simple_loss_samples_with, NoisePredictor, ScheduleKind,
};
use crate::diffnet::{init_params, mlp_forward, mlp_grad, Activation, MlpParams, MlpSpec};
use crate::em::{em_step_gmm, gmm_init_kmeans_pp, mcem_step, regularized_q_total};
use crate::meanfield::{
    elbo_analytic_lg, elbo_estimate, elbo_samples, fit_local, grad_omega_elbo, grad_theta_elbo,
    MeanFieldParams,
};
use crate::models::{lg_log_marginal, lg_posterior, GmmFamily, LgFamily, LinearGaussianModel};
use crate::numkit::{
    finite_diff_grad, gaussian_condition, kl_gaussian_dense, log_integral, rel_error, stats,
    QuadGrid, RngStream, Matrix, Vector, LN_2PI,
};

/// Outcome of one registered invariant. `pass` is set explicitly by each
/// check because the comparison direction varies (some values must stay
/// below the bound, others above it).
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckResult {
    fn le(name: &'static str, value: f64, bound: f64) -> Self {
        CheckResult {
            name,
            value,
            bound,
            pass: value <= bound,
        }
    }

    fn ge(name: &'static str, value: f64, bound: f64) -> Self {
        CheckResult {
            name,
            value,
            bound,
            pass: value >= bound,
        }
    }

    fn gt(name: &'static str, value: f64, bound: f64) -> Self {
        CheckResult {
            name,
            value,
            bound,
            pass: value > bound,
        }
    }

    /// One tab-separated report line: name, value, bound, verdict.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6e}\t{}",
            self.name,
            self.value,
            self.bound,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Numkit,
    Diffnet,
    Em,
    Vi,
    Vae,
    Ddm,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite, HarnessError> {
        match s {
            "numkit" => Ok(Suite::Numkit),
            "diffnet" => Ok(Suite::Diffnet),
            "em" => Ok(Suite::Em),
            "vi" => Ok(Suite::Vi),
            "vae" => Ok(Suite::Vae),
            "ddm" => Ok(Suite::Ddm),
            "all" => Ok(Suite::All),
            other => Err(HarnessError::Config(format!(
                "unknown suite `{other}`; expected numkit, diffnet, em, vi, vae, ddm, or all"
            ))),
        }
    }
}

pub const NUMKIT_CHECKS: &[&str] = &[
    "rng_clone_replays",
    "rng_substreams_distinct",
    "logsumexp_shift_invariant",
    "quadrature_normal_mass",
    "gaussian_condition_schur",
    "finite_diff_quadratic",
];

pub const DIFFNET_CHECKS: &[&str] = &[
    "mlp_grad_matches_fd",
    "mlp_zero_params_zero_output",
    "mlp_param_roundtrip",
];

pub const EM_CHECKS: &[&str] = &[
    "em_loglik_monotone",
    "em_surrogate_above_current",
    "em_surrogate_below_next",
    "mcem_root_m_slope",
];

pub const VI_CHECKS: &[&str] = &[
    "elbo_below_marginal",
    "elbo_tightness_identity",
    "local_fit_recovers_posterior",
    "elbo_grads_match_fd",
];

pub const VAE_CHECKS: &[&str] = &[
    "joint_grad_matches_fd",
    "amortized_bound_below_marginal",
    "exact_encoder_is_tight",
    "perturbed_encoder_pays_a_gap",
];

pub const DDM_CHECKS: &[&str] = &[
    "schedule_pythagoras",
    "forward_marginals_match",
    "posterior_matches_conditioning",
    "posterior_noise_identity",
    "zero_predictor_loss_is_dim",
    "oracle_noise_zeroes_loss",
    "noise_loss_grad_matches_fd",
];

pub fn suite_names(suite: Suite) -> Vec<&'static str> {
    match suite {
        Suite::Numkit => NUMKIT_CHECKS.to_vec(),
        Suite::Diffnet => DIFFNET_CHECKS.to_vec(),
        Suite::Em => EM_CHECKS.to_vec(),
        Suite::Vi => VI_CHECKS.to_vec(),
        Suite::Vae => VAE_CHECKS.to_vec(),
        Suite::Ddm => DDM_CHECKS.to_vec(),
        Suite::All => {
            let mut all = Vec::new();
            for s in [
                Suite::Numkit,
                Suite::Diffnet,
                Suite::Em,
                Suite::Vi,
                Suite::Vae,
                Suite::Ddm,
            ] {
                all.extend(suite_names(s));
            }
            all
        }
    }
}

pub fn registered_count(suite: Suite) -> usize {
    suite_names(suite).len()
}

/// Runs every check registered for `suite`, in table order.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>, HarnessError> {
    let root = RngStream::new(seed, super::STREAM_VERIFY);
    let out = match suite {
        Suite::Numkit => numkit_checks(&root.substream(0)),
        Suite::Diffnet => diffnet_checks(&root.substream(1)),
        Suite::Em => em_checks(&root.substream(2), seed)?,
        Suite::Vi => vi_checks(&root.substream(3))?,
        Suite::Vae => vae_checks(&root.substream(4))?,
        Suite::Ddm => ddm_checks(&root.substream(5))?,
        Suite::All => {
            let mut all = numkit_checks(&root.substream(0));
            all.extend(diffnet_checks(&root.substream(1)));
            all.extend(em_checks(&root.substream(2), seed)?);
            all.extend(vi_checks(&root.substream(3))?);
            all.extend(vae_checks(&root.substream(4))?);
            all.extend(ddm_checks(&root.substream(5))?);
            all
        }
    };
    let names = suite_names(suite);
    debug_assert_eq!(out.len(), names.len());
    debug_assert!(out.iter().zip(&names).all(|(r, n)| r.name == *n));
    Ok(out)
}

fn max_abs(v: &Vector) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn numkit_checks(base: &RngStream) -> Vec<CheckResult> {
    let mut out = Vec::new();

    // Cloning a stream replays it exactly.
    {
        let src = base.substream(0);
        let mut a = src.clone();
        let mut b = src.clone();
        let da = a.sample_std_normal(16);
        let db = b.sample_std_normal(16);
        out.push(CheckResult::le("rng_clone_replays", max_abs(&(da - db)), 0.0));
    }

    // Distinct substreams produce distinct draws.
    {
        let da = base.substream(1).sample_std_normal(16);
        let db = base.substream(2).sample_std_normal(16);
        out.push(CheckResult::gt(
            "rng_substreams_distinct",
            max_abs(&(da - db)),
            0.0,
        ));
    }

    // logsumexp(v + c) = logsumexp(v) + c, even for shifts that would
    // overflow a naive implementation.
    {
        let v = base.substream(3).sample_std_normal(8);
        let c = 500.0;
        let vals: Vec<f64> = v.iter().copied().collect();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let err = (stats::logsumexp(&shifted) - stats::logsumexp(&vals) - c).abs();
        out.push(CheckResult::le("logsumexp_shift_invariant", err, 1e-10));
    }

    // The standard quadrature grid integrates a standard normal to one.
    {
        let grid = QuadGrid::standard(2).expect("standard grid");
        let log_mass = log_integral(&grid, |z| -0.5 * z.norm_squared() - LN_2PI);
        out.push(CheckResult::le("quadrature_normal_mass", log_mass.abs(), 1e-8));
    }

    // Conditioning matches a hand-written Schur complement.
    {
        let mut rng = base.substream(4);
        let a = Matrix::from_fn(3, 3, |_, _| rng.standard_normal());
        let cov = &a * a.transpose() + Matrix::identity(3, 3) * 1.5;
        let mean = rng.sample_std_normal(3);
        let v = rng.standard_normal();
        let cond = gaussian_condition(&mean, &cov, &[2], &[v]).expect("condition");
        let gain = Vector::from_vec(vec![cov[(0, 2)], cov[(1, 2)]]) / cov[(2, 2)];
        let want_mean = Vector::from_vec(vec![mean[0], mean[1]]) + &gain * (v - mean[2]);
        let want_cov = Matrix::from_fn(2, 2, |r, c| cov[(r, c)] - gain[r] * cov[(2, c)]);
        let err = max_abs(&(cond.mean() - want_mean))
            .max((cond.cov() - want_cov).abs().max());
        out.push(CheckResult::le("gaussian_condition_schur", err, 1e-10));
    }

    // Central differences nail an analytic quadratic gradient.
    {
        let mut rng = base.substream(5);
        let x = rng.sample_std_normal(4);
        let c = rng.sample_std_normal(4);
        let f = |p: &Vector| 0.5 * p.norm_squared() + c.dot(p);
        let fd = finite_diff_grad(f, &x, 1e-5);
        let exact = &x + &c;
        out.push(CheckResult::le(
            "finite_diff_quadratic",
            rel_error(&fd, &exact),
            1e-8,
        ));
    }

    out
}

fn diffnet_checks(base: &RngStream) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let spec = MlpSpec::new(&[3, 5, 2], Activation::Tanh).expect("spec");

    // Backward sweep against central differences in both parameters and
    // input.
    {
        let mut rng = base.substream(0);
        let params = init_params(&spec, &mut rng);
        let x = rng.sample_std_normal(3);
        let u = rng.sample_std_normal(2);
        let (g_params, g_input) = mlp_grad(&params, &x, &u).expect("grad");
        let fd_params = finite_diff_grad(
            |p| {
                let trial = params.with_values(p.clone()).unwrap();
                u.dot(&mlp_forward(&trial, &x).unwrap())
            },
            params.values(),
            1e-5,
        );
        let fd_input = finite_diff_grad(|p| u.dot(&mlp_forward(&params, p).unwrap()), &x, 1e-5);
        let err = rel_error(&g_params, &fd_params).max(rel_error(&g_input, &fd_input));
        out.push(CheckResult::le("mlp_grad_matches_fd", err, 1e-6));
    }

    // All-zero parameters give the all-zero map.
    {
        let params = MlpParams::zeros(spec.clone());
        let y = mlp_forward(&params, &base.substream(1).sample_std_normal(3)).expect("forward");
        out.push(CheckResult::le("mlp_zero_params_zero_output", max_abs(&y), 0.0));
    }

    // Rebuilding parameters from their flat values changes nothing.
    {
        let mut rng = base.substream(2);
        let params = init_params(&spec, &mut rng);
        let rebuilt = params.with_values(params.values().clone()).expect("rebuild");
        let x = rng.sample_std_normal(3);
        let d = mlp_forward(&params, &x).unwrap() - mlp_forward(&rebuilt, &x).unwrap();
        out.push(CheckResult::le("mlp_param_roundtrip", max_abs(&d), 0.0));
    }

    out
}

fn em_checks(base: &RngStream, seed: u64) -> Result<Vec<CheckResult>, HarnessError> {
    let (data, _) = gen_data(DataSpec::Gmm2d, 150, seed ^ 0x5eed)?;
    let family = GmmFamily::new(2, 2);
    let num = |e: crate::models::ModelError| HarnessError::Numerical(e.to_string());

    let mut rng = base.substream(0);
    let mut model = gmm_init_kmeans_pp(&data, 2, &mut rng).map_err(num)?;
    let mut min_delta = f64::INFINITY;
    let mut min_above_current = f64::INFINITY;
    let mut min_below_next = f64::INFINITY;
    for _ in 0..20 {
        let ll_t = model.total_log_likelihood(&data);
        let next = em_step_gmm(&model, &data, &mut rng).map_err(num)?.0;
        let ll_next = next.total_log_likelihood(&data);
        let surrogate = regularized_q_total(
            &family,
            &family.pack(&next),
            &family.pack(&model),
            &data,
        )
        .map_err(num)?;
        min_delta = min_delta.min(ll_next - ll_t);
        min_above_current = min_above_current.min(surrogate - ll_t);
        min_below_next = min_below_next.min(ll_next - surrogate);
        model = next;
    }
    let mut out = vec![
        CheckResult::ge("em_loglik_monotone", min_delta, -1e-9),
        CheckResult::ge("em_surrogate_above_current", min_above_current, -1e-8),
        CheckResult::ge("em_surrogate_below_next", min_below_next, -1e-8),
    ];

    // Monte Carlo E-steps drift from the exact step at the M^(-1/2) rate.
    {
        let mut rng = base.substream(1);
        let anchor = gmm_init_kmeans_pp(&data, 2, &mut rng).map_err(num)?;
        let anchor = em_step_gmm(&anchor, &data, &mut rng).map_err(num)?.0;
        let target = family.pack(&em_step_gmm(&anchor, &data, &mut rng).map_err(num)?.0);
        let draws = [10usize, 100, 1000];
        let mut log_m = Vec::new();
        let mut log_dist = Vec::new();
        for (i, &m) in draws.iter().enumerate() {
            let mut acc = 0.0;
            let reps = 4;
            for r in 0..reps {
                let mut mc_rng = rng.substream((i * 10 + r) as u64);
                let stepped = mcem_step(&anchor, &data, m, &mut mc_rng).map_err(num)?;
                acc += (family.pack(&stepped) - &target).norm();
            }
            log_m.push((m as f64).ln());
            log_dist.push((acc / reps as f64).ln());
        }
        let slope = stats::slope(&log_m, &log_dist);
        out.push(CheckResult::le("mcem_root_m_slope", (slope + 0.5).abs(), 0.25));
    }

    Ok(out)
}

fn lg_reference() -> (LgFamily, LinearGaussianModel, Vector) {
    let family = LgFamily::new(3, 1);
    let model = LinearGaussianModel::new(
        Matrix::from_row_slice(3, 1, &[0.9, -0.6, 0.3]),
        Vector::from_vec(vec![0.5, -0.2, 0.1]),
        0.25,
    )
    .expect("reference model");
    let theta = family.pack(&model);
    (family, model, theta)
}

fn vi_checks(base: &RngStream) -> Result<Vec<CheckResult>, HarnessError> {
    let (family, model, theta) = lg_reference();
    let num = |e: crate::models::ModelError| HarnessError::Numerical(e.to_string());
    let mut out = Vec::new();

    // The stochastic bound sits below the marginal up to Monte Carlo
    // noise at every random (x, ω).
    {
        let mut rng = base.substream(0);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..20 {
            let x = model.offset() + rng.sample_std_normal(3) * 1.2;
            let params = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.5,
            );
            let samples = elbo_samples(&family, &theta, &params, &x, 256, &mut rng);
            let marginal = lg_log_marginal(&model, &x).map_err(num)?;
            let se = stats::se_mean(&samples).max(1e-12);
            worst = worst.max((stats::mean(&samples) - marginal) / se);
        }
        out.push(CheckResult::le("elbo_below_marginal", worst, 3.0));
    }

    // ELBO = marginal − KL(q ‖ posterior), exactly, in closed form.
    {
        let mut rng = base.substream(1);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = model.offset() + rng.sample_std_normal(3) * 1.2;
            let params = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.5,
            );
            let post = lg_posterior(&model, &x).map_err(num)?;
            let q_cov = Matrix::from_diagonal(&params.stddev().map(|b| b * b));
            let kl = kl_gaussian_dense(&params.alpha, &q_cov, post.mean(), post.cov())
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            let marginal = lg_log_marginal(&model, &x).map_err(num)?;
            let elbo = elbo_analytic_lg(&model, &params, &x);
            worst = worst.max((elbo - (marginal - kl)).abs());
        }
        out.push(CheckResult::le("elbo_tightness_identity", worst, 1e-8));
    }

    // Gradient ascent on one datum lands on the exact posterior.
    {
        let mut rng = base.substream(2);
        let x = model.offset() + rng.sample_std_normal(3);
        let post = lg_posterior(&model, &x).map_err(num)?;
        let fitted = fit_local(
            &family,
            &theta,
            &x,
            &MeanFieldParams::standard(1),
            600,
            1e-2,
            64,
            &mut rng,
        )
        .map_err(|e| HarnessError::Numerical(e.to_string()))?;
        let err = (fitted.alpha[0] - post.mean()[0])
            .abs()
            .max((fitted.stddev()[0] - post.cov()[(0, 0)].sqrt()).abs());
        out.push(CheckResult::le("local_fit_recovers_posterior", err, 1e-2));
    }

    // Both ELBO gradients against central differences under shared draws.
    {
        let mut rng = base.substream(3);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let x = model.offset() + rng.sample_std_normal(3);
            let params = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.5,
            );
            let draw_rng = rng.substream(17);
            let g_theta =
                grad_theta_elbo(&family, &theta, &params, &x, 8, &mut draw_rng.clone())
                    .map_err(num)?;
            let fd_theta = finite_diff_grad(
                |th| elbo_estimate(&family, th, &params, &x, 8, &mut draw_rng.clone()),
                &theta,
                1e-5,
            );
            let (g_alpha, g_log_beta) =
                grad_omega_elbo(&family, &theta, &params, &x, 8, &mut draw_rng.clone())
                    .map_err(num)?;
            let mut g_omega = Vector::zeros(2);
            g_omega[0] = g_alpha[0];
            g_omega[1] = g_log_beta[0];
            let fd_omega = finite_diff_grad(
                |w| {
                    elbo_estimate(
                        &family,
                        &theta,
                        &MeanFieldParams::unpack(w),
                        &x,
                        8,
                        &mut draw_rng.clone(),
                    )
                },
                &params.pack(),
                1e-5,
            );
            worst = worst
                .max(rel_error(&g_theta, &fd_theta))
                .max(rel_error(&g_omega, &fd_omega));
        }
        out.push(CheckResult::le("elbo_grads_match_fd", worst, 1e-4));
    }

    Ok(out)
}

/// Hand-built diagonal encoder whose affine mean net and constant
/// log-variance head reproduce the exact linear-Gaussian posterior for
/// k = 1: mean = wᵀ(x − μ) / (σ²λ) with λ = 1 + wᵀw/σ², variance 1/λ.
fn exact_lg_encoder(model: &LinearGaussianModel) -> (Encoder, Vector) {
    let d = model.data_dim();
    let mean_spec = MlpSpec::new(&[d, 1], Activation::Tanh).expect("mean spec");
    let head_spec = MlpSpec::new(&[d, 1], Activation::Tanh).expect("head spec");
    let enc = Encoder::diagonal(mean_spec, head_spec).expect("encoder");
    let w = model.loading().column(0).into_owned();
    let lambda = 1.0 + w.norm_squared() / model.noise_var();
    let coeff = &w / (model.noise_var() * lambda);
    let mut phi = Vector::zeros(enc.param_len());
    for c in 0..d {
        phi[c] = coeff[c];
    }
    phi[d] = -coeff.dot(model.offset());
    // Head block: zero weights, bias = log posterior variance.
    phi[(d + 1) + d] = -lambda.ln();
    (enc, phi)
}

fn vae_checks(base: &RngStream) -> Result<Vec<CheckResult>, HarnessError> {
    let (family, model, theta) = lg_reference();
    let num = |e: crate::amortized::AmortizedError| HarnessError::Numerical(e.to_string());
    let mut out = Vec::new();

    // Joint (θ, φ) gradient against central differences under shared
    // draws, through a nonlinear encoder.
    {
        let mut rng = base.substream(0);
        let enc = Encoder::diagonal(
            MlpSpec::new(&[3, 4, 1], Activation::Tanh).unwrap(),
            MlpSpec::new(&[3, 1], Activation::Tanh).unwrap(),
        )
        .map_err(num)?;
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let phi = enc.init(&mut rng);
            let batch: Vec<Vector> = (0..3)
                .map(|_| model.offset() + rng.sample_std_normal(3))
                .collect();
            let draw_rng = rng.substream(29);
            let (g_theta, g_phi) =
                grad_joint(&family, &theta, &enc, &phi, &batch, 4, &mut draw_rng.clone())
                    .map_err(num)?;
            let fd_theta = finite_diff_grad(
                |th| {
                    batch_elbo_a(&family, th, &enc, &phi, &batch, 4, &mut draw_rng.clone())
                        .unwrap()
                },
                &theta,
                1e-5,
            );
            let fd_phi = finite_diff_grad(
                |p| {
                    batch_elbo_a(&family, &theta, &enc, p, &batch, 4, &mut draw_rng.clone())
                        .unwrap()
                },
                &phi,
                1e-5,
            );
            worst = worst
                .max(rel_error(&g_theta, &fd_theta))
                .max(rel_error(&g_phi, &fd_phi));
        }
        out.push(CheckResult::le("joint_grad_matches_fd", worst, 1e-4));
    }

    // Amortized bound stays below the marginal up to Monte Carlo noise
    // even for an untrained encoder.
    {
        let mut rng = base.substream(1);
        let enc = Encoder::diagonal(
            MlpSpec::new(&[3, 4, 1], Activation::Tanh).unwrap(),
            MlpSpec::new(&[3, 1], Activation::Tanh).unwrap(),
        )
        .map_err(num)?;
        let phi = enc.init(&mut rng);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..10 {
            let x = model.offset() + rng.sample_std_normal(3) * 1.2;
            let batch = [x.clone()];
            let reps: Vec<f64> = (0..8)
                .map(|r| {
                    batch_elbo_a(
                        &family,
                        &theta,
                        &enc,
                        &phi,
                        &batch,
                        64,
                        &mut rng.substream(100 + r),
                    )
                    .unwrap()
                })
                .collect();
            let marginal = lg_log_marginal(&model, &x)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            let se = stats::se_mean(&reps).max(1e-12);
            worst = worst.max((stats::mean(&reps) - marginal) / se);
        }
        out.push(CheckResult::le("amortized_bound_below_marginal", worst, 3.0));
    }

    // With the exact-posterior encoder the bound closes completely:
    // evaluating the closed-form bound at the encoder's output recovers
    // the marginal to rounding error.
    {
        let mut rng = base.substream(2);
        let (enc, phi) = exact_lg_encoder(&model);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let x = model.offset() + rng.sample_std_normal(3) * 1.2;
            let params = encode(&enc, &phi, &x).map_err(num)?.as_mean_field();
            let bound = elbo_analytic_lg(&model, &params, &x);
            let marginal = lg_log_marginal(&model, &x)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            worst = worst.max((bound - marginal).abs());
        }
        out.push(CheckResult::le("exact_encoder_is_tight", worst, 1e-8));
    }

    // Knocking the exact encoder's mean off target opens a gap that
    // per-datum refinement recovers, several noise widths wide.
    {
        let mut rng = base.substream(3);
        let (enc, mut phi) = exact_lg_encoder(&model);
        phi[3] += 0.8; // mean bias
        let mut worst = f64::INFINITY;
        for _ in 0..5 {
            let x = model.offset() + rng.sample_std_normal(3);
            let report =
                amortization_gap_report(&family, &theta, &enc, &phi, &x, 400, &mut rng)
                    .map_err(num)?;
            worst = worst.min(report.gap / report.se.max(1e-12));
        }
        out.push(CheckResult::gt("perturbed_encoder_pays_a_gap", worst, 2.0));
    }

    Ok(out)
}

fn ddm_checks(base: &RngStream) -> Result<Vec<CheckResult>, HarnessError> {
    let num = |e: crate::ddm::DdmError| HarnessError::Numerical(e.to_string());
    let mut out = Vec::new();

    // a_t² + b_t² = 1 along the whole schedule.
    {
        let sched = schedule_make(
            ScheduleKind::Linear {
                phi_start: 0.99,
                phi_end: 0.9,
            },
            8,
        )
        .map_err(num)?;
        let mut worst = 0.0f64;
        for t in 1..=sched.t_max() {
            worst = worst.max((sched.a(t).powi(2) + sched.b(t).powi(2) - 1.0).abs());
        }
        out.push(CheckResult::le("schedule_pythagoras", worst, 1e-12));
    }

    // Iterating the forward kernel matches the one-shot marginal in
    // per-coordinate mean and variance.
    {
        let sched = schedule_make(ScheduleKind::Constant { phi: 0.9 }, 4).map_err(num)?;
        let mut rng = base.substream(0);
        let y0 = rng.sample_std_normal(2);
        let reps = 4000;
        let mut iterated: Vec<Vector> = Vec::with_capacity(reps);
        let mut oneshot: Vec<Vector> = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut y = y0.clone();
            for t in 1..=sched.t_max() {
                y = forward_step(&y, t, &sched, &mut rng);
            }
            iterated.push(y);
            oneshot.push(forward_jump(&y0, sched.t_max(), &sched, &mut rng));
        }
        let mut worst = 0.0f64;
        for j in 0..2 {
            let a: Vec<f64> = iterated.iter().map(|v| v[j]).collect();
            let b: Vec<f64> = oneshot.iter().map(|v| v[j]).collect();
            let se_mean_diff = (stats::variance(&a) / reps as f64
                + stats::variance(&b) / reps as f64)
                .sqrt();
            worst = worst.max((stats::mean(&a) - stats::mean(&b)).abs() / se_mean_diff);
            // Variance of a sample variance for a Gaussian: 2σ⁴/(n−1).
            let se_var_diff = ((2.0 * stats::variance(&a).powi(2)
                + 2.0 * stats::variance(&b).powi(2))
                / (reps - 1) as f64)
                .sqrt();
            worst = worst.max((stats::variance(&a) - stats::variance(&b)).abs() / se_var_diff);
        }
        out.push(CheckResult::le("forward_marginals_match", worst, 3.5));
    }

    // Reverse-process posterior parameters against generic Gaussian
    // conditioning on the (Y_{t−1}, Y_t) joint.
    {
        let sched = schedule_make(
            ScheduleKind::Linear {
                phi_start: 0.99,
                phi_end: 0.9,
            },
            6,
        )
        .map_err(num)?;
        let mut rng = base.substream(1);
        let mut worst = 0.0f64;
        for trial in 0..10 {
            let t = 2 + (trial % (sched.t_max() - 1));
            let y0 = rng.sample_std_normal(2);
            let yt = rng.sample_std_normal(2);
            let (mu, var) = posterior_params(&yt, &y0, t, &sched).map_err(num)?;
            for j in 0..2 {
                let b_prev2 = sched.b(t - 1).powi(2);
                let mean = Vector::from_vec(vec![sched.a(t - 1) * y0[j], sched.a(t) * y0[j]]);
                let cross = sched.phi(t).sqrt() * b_prev2;
                let cov = Matrix::from_row_slice(
                    2,
                    2,
                    &[b_prev2, cross, cross, sched.b(t).powi(2)],
                );
                let cond = gaussian_condition(&mean, &cov, &[1], &[yt[j]])
                    .map_err(|e| HarnessError::Numerical(e.to_string()))?;
                worst = worst
                    .max((cond.mean()[0] - mu[j]).abs())
                    .max((cond.cov()[(0, 0)] - var).abs());
            }
        }
        out.push(CheckResult::le("posterior_matches_conditioning", worst, 1e-10));
    }

    // Substituting y_0 = (y_t − b_t ε)/a_t turns the posterior mean into
    // its noise form.
    {
        let sched = schedule_make(
            ScheduleKind::Linear {
                phi_start: 0.99,
                phi_end: 0.9,
            },
            6,
        )
        .map_err(num)?;
        let mut rng = base.substream(2);
        let mut worst = 0.0f64;
        for trial in 0..10 {
            let t = 2 + (trial % (sched.t_max() - 1));
            let y0 = rng.sample_std_normal(2);
            let eps = rng.sample_std_normal(2);
            let yt = forward_jump_with(&y0, t, &sched, &eps);
            let (mu, _) = posterior_params(&yt, &y0, t, &sched).map_err(num)?;
            let via_noise = mu_from_psi(&eps, &yt, t, &sched);
            worst = worst.max(max_abs(&(mu - via_noise)));
        }
        out.push(CheckResult::le("posterior_noise_identity", worst, 1e-10));
    }

    // With Ψ ≡ 0 the unweighted objective is E‖ε‖² = d.
    {
        let sched = schedule_make(ScheduleKind::Constant { phi: 0.9 }, 4).map_err(num)?;
        let mut rng = base.substream(3);
        let batch: Vec<Vector> = (0..50).map(|_| rng.sample_std_normal(2)).collect();
        let samples = simple_loss_samples_with(
            |_, _, _| Vector::zeros(2),
            &batch,
            80,
            &sched,
            &mut rng,
            false,
        );
        let z = (stats::mean(&samples) - 2.0).abs() / stats::se_mean(&samples).max(1e-12);
        out.push(CheckResult::le("zero_predictor_loss_is_dim", z, 3.5));
    }

    // Feeding the true noise back in zeroes every term of the loss.
    {
        let sched = schedule_make(ScheduleKind::Constant { phi: 0.9 }, 4).map_err(num)?;
        let mut rng = base.substream(4);
        let batch: Vec<Vector> = (0..20).map(|_| rng.sample_std_normal(2)).collect();
        let samples = simple_loss_samples_with(
            |_, _, noise| noise.clone(),
            &batch,
            10,
            &sched,
            &mut rng,
            true,
        );
        let worst = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        out.push(CheckResult::le("oracle_noise_zeroes_loss", worst, 0.0));
    }

    // Loss gradient against central differences under shared draws.
    {
        let sched = schedule_make(ScheduleKind::Constant { phi: 0.9 }, 4).map_err(num)?;
        let psi = NoisePredictor::with_hidden(2, &[4], Activation::Tanh).map_err(num)?;
        let mut rng = base.substream(5);
        let mut worst = 0.0f64;
        for trial in 0..5 {
            let theta = psi.init(&mut rng);
            let batch: Vec<Vector> = (0..3).map(|_| rng.sample_std_normal(2)).collect();
            let weighted = trial % 2 == 0;
            let draw_rng = rng.substream(41);
            let (_, g) = grad_simple_loss(
                &psi,
                &theta,
                &batch,
                2,
                &sched,
                &mut draw_rng.clone(),
                weighted,
            )
            .map_err(num)?;
            let fd = finite_diff_grad(
                |th| {
                    simple_loss(&psi, th, &batch, 2, &sched, &mut draw_rng.clone(), weighted)
                        .unwrap()
                },
                &theta,
                1e-5,
            );
            worst = worst.max(rel_error(&g, &fd));
        }
        out.push(CheckResult::le("noise_loss_grad_matches_fd", worst, 1e-4));
    }

    Ok(out)
}

pub const GRADCHECK_NAMES: &[&str] = &[
    "grad_mlp",
    "grad_elbo_theta",
    "grad_elbo_omega",
    "grad_joint",
    "grad_trajectory",
    "grad_simple_loss",
];

/// Audits every analytic gradient in the crate against central
/// differences under shared draws, `trials` random configurations each.
/// Relative error is the L2 distance over the larger norm.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<Vec<CheckResult>, HarnessError> {
    let root = RngStream::new(seed, super::STREAM_GRADCHECK);
    let bound = 1e-4;
    let mut out = Vec::new();
    let num_m = |e: crate::models::ModelError| HarnessError::Numerical(e.to_string());
    let num_a = |e: crate::amortized::AmortizedError| HarnessError::Numerical(e.to_string());
    let num_d = |e: crate::ddm::DdmError| HarnessError::Numerical(e.to_string());

    // Raw network vector-Jacobian products.
    {
        let mut rng = root.substream(0);
        let specs = [
            MlpSpec::new(&[2, 1], Activation::Tanh).unwrap(),
            MlpSpec::new(&[3, 4, 2], Activation::Tanh).unwrap(),
            MlpSpec::new(&[2, 5, 5, 1], Activation::Softplus).unwrap(),
        ];
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let spec = &specs[trial % specs.len()];
            let params = init_params(spec, &mut rng);
            let x = rng.sample_std_normal(spec.input_size());
            let u = rng.sample_std_normal(spec.output_size());
            let (g_params, g_input) = mlp_grad(&params, &x, &u).map_err(|e| {
                HarnessError::Numerical(e.to_string())
            })?;
            let fd_params = finite_diff_grad(
                |p| {
                    let trial_params = params.with_values(p.clone()).unwrap();
                    u.dot(&mlp_forward(&trial_params, &x).unwrap())
                },
                params.values(),
                1e-5,
            );
            let fd_input =
                finite_diff_grad(|p| u.dot(&mlp_forward(&params, p).unwrap()), &x, 1e-5);
            worst = worst
                .max(rel_error(&g_params, &fd_params))
                .max(rel_error(&g_input, &fd_input));
        }
        out.push(CheckResult::le("grad_mlp", worst, bound));
    }

    let (family, model, theta_star) = lg_reference();

    // Score-function θ-gradient of the per-datum bound.
    {
        let mut rng = root.substream(1);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let mut theta = theta_star.clone();
            for j in 0..theta.len() {
                theta[j] += 0.1 * rng.standard_normal();
            }
            let params = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.4,
            );
            let x = model.offset() + rng.sample_std_normal(3);
            let draw_rng = rng.substream(7);
            let g = grad_theta_elbo(&family, &theta, &params, &x, 4, &mut draw_rng.clone())
                .map_err(num_m)?;
            let fd = finite_diff_grad(
                |th| elbo_estimate(&family, th, &params, &x, 4, &mut draw_rng.clone()),
                &theta,
                1e-5,
            );
            worst = worst.max(rel_error(&g, &fd));
        }
        out.push(CheckResult::le("grad_elbo_theta", worst, bound));
    }

    // Pathwise ω-gradient of the per-datum bound.
    {
        let mut rng = root.substream(2);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let params = MeanFieldParams::new(
                rng.sample_std_normal(1),
                rng.sample_std_normal(1) * 0.4,
            );
            let x = model.offset() + rng.sample_std_normal(3);
            let draw_rng = rng.substream(11);
            let (g_alpha, g_log_beta) =
                grad_omega_elbo(&family, &theta_star, &params, &x, 4, &mut draw_rng.clone())
                    .map_err(num_m)?;
            let mut g = Vector::zeros(2);
            g[0] = g_alpha[0];
            g[1] = g_log_beta[0];
            let fd = finite_diff_grad(
                |w| {
                    elbo_estimate(
                        &family,
                        &theta_star,
                        &MeanFieldParams::unpack(w),
                        &x,
                        4,
                        &mut draw_rng.clone(),
                    )
                },
                &params.pack(),
                1e-5,
            );
            worst = worst.max(rel_error(&g, &fd));
        }
        out.push(CheckResult::le("grad_elbo_omega", worst, bound));
    }

    // Joint (θ, φ) gradient through the encoder.
    {
        let mut rng = root.substream(3);
        let enc = Encoder::diagonal(
            MlpSpec::new(&[3, 4, 1], Activation::Tanh).unwrap(),
            MlpSpec::new(&[3, 1], Activation::Tanh).unwrap(),
        )
        .map_err(num_a)?;
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let phi = enc.init(&mut rng);
            let batch: Vec<Vector> = (0..2)
                .map(|_| model.offset() + rng.sample_std_normal(3))
                .collect();
            let draw_rng = rng.substream(13);
            let (g_theta, g_phi) = grad_joint(
                &family,
                &theta_star,
                &enc,
                &phi,
                &batch,
                2,
                &mut draw_rng.clone(),
            )
            .map_err(num_a)?;
            let fd_theta = finite_diff_grad(
                |th| {
                    batch_elbo_a(&family, th, &enc, &phi, &batch, 2, &mut draw_rng.clone())
                        .unwrap()
                },
                &theta_star,
                1e-5,
            );
            let fd_phi = finite_diff_grad(
                |p| {
                    batch_elbo_a(&family, &theta_star, &enc, p, &batch, 2, &mut draw_rng.clone())
                        .unwrap()
                },
                &phi,
                1e-5,
            );
            worst = worst
                .max(rel_error(&g_theta, &fd_theta))
                .max(rel_error(&g_phi, &fd_phi));
        }
        out.push(CheckResult::le("grad_joint", worst, bound));
    }

    // Trajectory-form bound gradient.
    {
        let mut rng = root.substream(4);
        let sched = schedule_make(ScheduleKind::Constant { phi: 0.9 }, 3)
            .map_err(num_d)?;
        let psi = NoisePredictor::with_hidden(2, &[4], Activation::Tanh).map_err(num_d)?;
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let theta = psi.init(&mut rng);
            let y0 = rng.sample_std_normal(2);
            let draw_rng = rng.substream(19);
            let g = grad_trajectory(&psi, &theta, &sched, &y0, 2, &mut draw_rng.clone())
                .map_err(num_d)?;
            let fd = finite_diff_grad(
                |th| elbo_refined(&psi, th, &sched, &y0, 2, &mut draw_rng.clone()).unwrap(),
                &theta,
                1e-5,
            );
            worst = worst.max(rel_error(&g, &fd));
        }
        out.push(CheckResult::le("grad_trajectory", worst, bound));
    }

    // Noise-prediction loss gradient, both weightings.
    {
        let mut rng = root.substream(5);
        let sched = schedule_make(
            ScheduleKind::Linear {
                phi_start: 0.99,
                phi_end: 0.9,
            },
            4,
        )
        .map_err(num_d)?;
        let psi = NoisePredictor::with_hidden(2, &[4], Activation::Tanh).map_err(num_d)?;
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let theta = psi.init(&mut rng);
            let batch: Vec<Vector> = (0..2).map(|_| rng.sample_std_normal(2)).collect();
            let weighted = trial % 2 == 0;
            let draw_rng = rng.substream(23);
            let (_, g) = grad_simple_loss(
                &psi,
                &theta,
                &batch,
                2,
                &sched,
                &mut draw_rng.clone(),
                weighted,
            )
            .map_err(num_d)?;
            let fd = finite_diff_grad(
                |th| {
                    simple_loss(&psi, th, &batch, 2, &sched, &mut draw_rng.clone(), weighted)
                        .unwrap()
                },
                &theta,
                1e-5,
            );
            worst = worst.max(rel_error(&g, &fd));
        }
        out.push(CheckResult::le("grad_simple_loss", worst, bound));
    }

    Ok(out)
}
