//! Amortized variational inference: a pair of networks maps each datum
//! directly to the parameters of a Gaussian approximate posterior, so
//! inference for a fresh datum is a single forward pass instead of a
//! per-datum optimization. Training ascends the resulting evidence bound
//! jointly in the model parameters θ and the encoder parameters φ.
//!
//! The encoder covariance comes in two flavours: a diagonal head (the
//! default everywhere) and a dense lower-triangular Cholesky head, which is
//! exercised by the gradient checks but not used by the trainers.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::diffnet::{
    clamp_log_var, init_params, mlp_forward, mlp_grad, DiffnetError, MlpParams, MlpSpec,
};
use crate::meanfield::{self, Adam, MeanFieldParams, ViError};
use crate::models::{LatentKind, LatentModel, ModelError};
use crate::numkit::stats;
use crate::numkit::{Matrix, RngStream, Vector, LN_2PI};

/// Default number of local refinement steps used when measuring the
/// amortization gap.
pub const DEFAULT_GAP_BUDGET: usize = 500;

/// Monte Carlo draws per bound term when measuring the amortization gap.
const GAP_EVAL_SAMPLES: usize = 1024;
/// Draws per ascent step during the local refinement inside the gap measure.
const GAP_FIT_SAMPLES: usize = 32;
/// Step size of the local refinement inside the gap measure.
const GAP_FIT_GAMMA: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum AmortizedError {
    #[error("network error: {0}")]
    Net(#[from] DiffnetError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("local refinement failed: {0}")]
    Local(#[from] ViError),
    #[error("incompatible configuration: {0}")]
    Spec(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        /// Batch index within the epoch; equal to the batch count when the
        /// end-of-epoch evaluation produced the non-finite value.
        batch: usize,
        /// Last finite iterate, kept so a failed run can still be inspected.
        state: Box<VaeState>,
    },
}

/// Covariance head of the encoder.
#[derive(Clone, Debug)]
pub enum CovHead {
    /// Network output is the per-coordinate log-variance (length k).
    Diagonal(MlpSpec),
    /// Network output is a flattened lower triangle (length k(k+1)/2,
    /// row-major); diagonal entries are stored as log-scales and passed
    /// through an exponential so the factor is always invertible.
    Cholesky(MlpSpec),
}

/// Encoder: a mean network x ↦ η and a covariance head, both reading the
/// same datum. Parameters are a single flat vector, mean network first.
#[derive(Debug)]
pub struct Encoder {
    mean_spec: MlpSpec,
    head: CovHead,
    saturations: AtomicU64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Encoder {
            mean_spec: self.mean_spec.clone(),
            head: self.head.clone(),
            saturations: AtomicU64::new(self.saturations.load(Ordering::Relaxed)),
        }
    }
}

fn tri_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Row-major position of entry (j, l), l ≤ j, in a flattened lower triangle.
fn tri_index(j: usize, l: usize) -> usize {
    j * (j + 1) / 2 + l
}

impl Encoder {
    pub fn diagonal(mean_spec: MlpSpec, log_var_spec: MlpSpec) -> Result<Self, AmortizedError> {
        if mean_spec.input_size() != log_var_spec.input_size() {
            return Err(AmortizedError::Spec(format!(
                "mean network reads {} inputs, log-variance network reads {}",
                mean_spec.input_size(),
                log_var_spec.input_size()
            )));
        }
        if mean_spec.output_size() != log_var_spec.output_size() {
            return Err(AmortizedError::Spec(format!(
                "mean network emits {} outputs, log-variance network emits {}",
                mean_spec.output_size(),
                log_var_spec.output_size()
            )));
        }
        Ok(Encoder {
            mean_spec,
            head: CovHead::Diagonal(log_var_spec),
            saturations: AtomicU64::new(0),
        })
    }

    pub fn cholesky(mean_spec: MlpSpec, chol_spec: MlpSpec) -> Result<Self, AmortizedError> {
        if mean_spec.input_size() != chol_spec.input_size() {
            return Err(AmortizedError::Spec(format!(
                "mean network reads {} inputs, factor network reads {}",
                mean_spec.input_size(),
                chol_spec.input_size()
            )));
        }
        let k = mean_spec.output_size();
        if chol_spec.output_size() != tri_len(k) {
            return Err(AmortizedError::Spec(format!(
                "factor network emits {} outputs, a {}-dimensional latent needs {}",
                chol_spec.output_size(),
                k,
                tri_len(k)
            )));
        }
        Ok(Encoder {
            mean_spec,
            head: CovHead::Cholesky(chol_spec),
            saturations: AtomicU64::new(0),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.mean_spec.input_size()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_spec.output_size()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.head, CovHead::Diagonal(_))
    }

    pub fn mean_spec(&self) -> &MlpSpec {
        &self.mean_spec
    }

    pub fn head_spec(&self) -> &MlpSpec {
        match &self.head {
            CovHead::Diagonal(s) | CovHead::Cholesky(s) => s,
        }
    }

    pub fn param_len(&self) -> usize {
        self.mean_spec.param_len() + self.head_spec().param_len()
    }

    /// Glorot-style initial parameters for both networks, concatenated.
    pub fn init(&self, rng: &mut RngStream) -> Vector {
        let mean = init_params(&self.mean_spec, rng);
        let head = init_params(self.head_spec(), rng);
        let mut phi = Vector::zeros(self.param_len());
        phi.rows_mut(0, mean.values().len()).copy_from(mean.values());
        phi.rows_mut(mean.values().len(), head.values().len())
            .copy_from(head.values());
        phi
    }

    /// Number of log-variance clamp events observed so far.
    pub fn saturation_count(&self) -> u64 {
        self.saturations.load(Ordering::Relaxed)
    }

    pub fn reset_saturation_count(&self) {
        self.saturations.store(0, Ordering::Relaxed);
    }

    fn split(&self, phi: &Vector) -> Result<(MlpParams, MlpParams), AmortizedError> {
        if phi.len() != self.param_len() {
            return Err(AmortizedError::Spec(format!(
                "phi has {} entries, encoder expects {}",
                phi.len(),
                self.param_len()
            )));
        }
        let ml = self.mean_spec.param_len();
        let mean = MlpParams::new(self.mean_spec.clone(), phi.rows(0, ml).into_owned())?;
        let head = MlpParams::new(
            self.head_spec().clone(),
            phi.rows(ml, phi.len() - ml).into_owned(),
        )?;
        Ok((mean, head))
    }
}

/// Scale factor of an encoded Gaussian: either per-coordinate standard
/// deviations or a dense lower-triangular Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub enum Scale {
    Diag(Vector),
    Chol(Matrix),
}

/// An encoded approximate posterior N(mean, LLᵀ); in the diagonal case L is
/// diag(stddev).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub mean: Vector,
    pub scale: Scale,
}

impl Encoded {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Differential entropy; closed form, never sampled.
    pub fn entropy(&self) -> f64 {
        let k = self.dim() as f64;
        let log_det_scale: f64 = match &self.scale {
            Scale::Diag(s) => s.iter().map(|v| v.ln()).sum(),
            Scale::Chol(l) => (0..self.dim()).map(|j| l[(j, j)].ln()).sum(),
        };
        0.5 * k * (1.0 + LN_2PI) + log_det_scale
    }

    /// The reparameterized draw mean + L·eps.
    pub fn transform(&self, eps: &Vector) -> Vector {
        match &self.scale {
            Scale::Diag(s) => &self.mean + s.component_mul(eps),
            Scale::Chol(l) => &self.mean + l * eps,
        }
    }

    /// Per-coordinate marginal standard deviations (the square roots of the
    /// diagonal of LLᵀ).
    pub fn marginal_stddev(&self) -> Vector {
        match &self.scale {
            Scale::Diag(s) => s.clone(),
            Scale::Chol(l) => Vector::from_fn(self.dim(), |j, _| {
                (0..=j).map(|c| l[(j, c)] * l[(j, c)]).sum::<f64>().sqrt()
            }),
        }
    }

    /// Mean-field view of the encoded posterior, used to seed local
    /// refinement. Exact for the diagonal head; for the dense head it keeps
    /// the marginal spreads and drops correlations.
    pub fn as_mean_field(&self) -> MeanFieldParams {
        MeanFieldParams::new(self.mean.clone(), self.marginal_stddev().map(|s| s.ln()))
    }
}

/// Raw head output plus per-output clamp flags; kept by the gradient path so
/// saturated coordinates propagate exactly zero sensitivity.
struct EncodeDetail {
    encoded: Encoded,
    clamped: Vec<bool>,
}

fn encode_detail(
    enc: &Encoder,
    phi: &Vector,
    x: &Vector,
) -> Result<EncodeDetail, AmortizedError> {
    let (mean_params, head_params) = enc.split(phi)?;
    let eta = mlp_forward(&mean_params, x)?;
    let raw = mlp_forward(&head_params, x)?;
    let k = enc.latent_dim();
    match &enc.head {
        CovHead::Diagonal(_) => {
            let mut stddev = Vector::zeros(k);
            let mut clamped = vec![false; k];
            for j in 0..k {
                let (lv, sat) = clamp_log_var(raw[j]);
                if sat {
                    enc.saturations.fetch_add(1, Ordering::Relaxed);
                    clamped[j] = true;
                }
                stddev[j] = (0.5 * lv).exp();
            }
            Ok(EncodeDetail {
                encoded: Encoded {
                    mean: eta,
                    scale: Scale::Diag(stddev),
                },
                clamped,
            })
        }
        CovHead::Cholesky(_) => {
            let mut l = Matrix::zeros(k, k);
            let mut clamped = vec![false; tri_len(k)];
            for j in 0..k {
                for c in 0..j {
                    l[(j, c)] = raw[tri_index(j, c)];
                }
                // The stored diagonal entry is a log-scale; clamping twice
                // the value reuses the shared log-variance guard rails.
                let (lv, sat) = clamp_log_var(2.0 * raw[tri_index(j, j)]);
                if sat {
                    enc.saturations.fetch_add(1, Ordering::Relaxed);
                    clamped[tri_index(j, j)] = true;
                }
                l[(j, j)] = (0.5 * lv).exp();
            }
            Ok(EncodeDetail {
                encoded: Encoded {
                    mean: eta,
                    scale: Scale::Chol(l),
                },
                clamped,
            })
        }
    }
}

/// Runs the encoder on one datum.
pub fn encode(enc: &Encoder, phi: &Vector, x: &Vector) -> Result<Encoded, AmortizedError> {
    Ok(encode_detail(enc, phi, x)?.encoded)
}

fn check_compat(model: &dyn LatentModel, enc: &Encoder) -> Result<(), AmortizedError> {
    match model.latent_kind() {
        LatentKind::Continuous { k } if k == enc.latent_dim() => {}
        LatentKind::Continuous { k } => {
            return Err(AmortizedError::Spec(format!(
                "encoder emits {}-dimensional latents, model wants {}",
                enc.latent_dim(),
                k
            )))
        }
        LatentKind::Discrete { .. } => {
            return Err(AmortizedError::Spec(
                "amortized inference needs continuous latents".into(),
            ))
        }
    }
    if model.data_dim() != enc.data_dim() {
        return Err(AmortizedError::Spec(format!(
            "encoder reads {}-dimensional data, model emits {}",
            enc.data_dim(),
            model.data_dim()
        )));
    }
    Ok(())
}

/// One bound sample per draw: complete-data log-likelihood at a
/// reparameterized latent plus the closed-form entropy. The mean of the
/// returned values is the bound estimate and their spread gives its standard
/// error.
pub fn elbo_a_samples(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>, AmortizedError> {
    assert!(m >= 1, "elbo_a_samples requires M >= 1");
    check_compat(model, enc)?;
    let encoded = encode(enc, phi, x)?;
    let entropy = encoded.entropy();
    let k = encoded.dim();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let eps = rng.sample_std_normal(k);
        let z = encoded.transform(&eps);
        out.push(model.complete_loglik(theta, x, &z) + entropy);
    }
    Ok(out)
}

/// Monte Carlo estimate of the amortized evidence bound for one datum.
pub fn elbo_a_estimate(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    x: &Vector,
    m: usize,
    rng: &mut RngStream,
) -> Result<f64, AmortizedError> {
    Ok(stats::mean(&elbo_a_samples(model, theta, enc, phi, x, m, rng)?))
}

/// Batch-mean bound estimate. Draws are consumed datum by datum in batch
/// order, exactly as in [`grad_joint`], so the two functions agree under
/// common random numbers.
pub fn batch_elbo_a(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    batch: &[Vector],
    m: usize,
    rng: &mut RngStream,
) -> Result<f64, AmortizedError> {
    assert!(!batch.is_empty(), "batch_elbo_a requires a non-empty batch");
    let mut total = 0.0;
    for x in batch {
        total += elbo_a_estimate(model, theta, enc, phi, x, m, rng)?;
    }
    Ok(total / batch.len() as f64)
}

/// Joint gradient of the batch-mean bound: the θ part averages
/// complete-data scores over draws and data; the φ part flows pathwise
/// through the reparameterization (mean network and scale head) plus the
/// closed-form entropy term, which contributes ½ ∂ log det Ω / ∂φ without
/// any sampling noise.
pub fn grad_joint(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    batch: &[Vector],
    m: usize,
    rng: &mut RngStream,
) -> Result<(Vector, Vector), AmortizedError> {
    assert!(m >= 1, "grad_joint requires M >= 1");
    assert!(!batch.is_empty(), "grad_joint requires a non-empty batch");
    check_compat(model, enc)?;
    let (mean_params, head_params) = enc.split(phi)?;
    let k = enc.latent_dim();
    let head_out = enc.head_spec().output_size();

    let mut grad_theta = Vector::zeros(model.param_len());
    let mut grad_phi_mean = Vector::zeros(mean_params.values().len());
    let mut grad_phi_head = Vector::zeros(head_params.values().len());

    for x in batch {
        let detail = encode_detail(enc, phi, x)?;
        let encoded = &detail.encoded;
        let mut score_acc = Vector::zeros(model.param_len());
        let mut cot_eta = Vector::zeros(k);
        let mut cot_head = Vector::zeros(head_out);
        for _ in 0..m {
            let eps = rng.sample_std_normal(k);
            let z = encoded.transform(&eps);
            score_acc += model.score_theta(theta, x, &z)?;
            let gz = model.grad_z(theta, x, &z)?;
            cot_eta += &gz;
            match &encoded.scale {
                Scale::Diag(stddev) => {
                    for j in 0..k {
                        if !detail.clamped[j] {
                            // z_j = η_j + exp(o_j/2) ε_j, so ∂z_j/∂o_j is
                            // half the scaled noise.
                            cot_head[j] += gz[j] * 0.5 * stddev[j] * eps[j];
                        }
                    }
                }
                Scale::Chol(l) => {
                    for j in 0..k {
                        for c in 0..j {
                            cot_head[tri_index(j, c)] += gz[j] * eps[c];
                        }
                        if !detail.clamped[tri_index(j, j)] {
                            cot_head[tri_index(j, j)] += gz[j] * eps[j] * l[(j, j)];
                        }
                    }
                }
            }
        }
        let scale = 1.0 / m as f64;
        score_acc *= scale;
        cot_eta *= scale;
        cot_head *= scale;
        // Entropy gradient: log det L is a plain sum of the stored
        // diagonal log-scales, so the cotangent is a constant per entry.
        match &enc.head {
            CovHead::Diagonal(_) => {
                for (j, item) in cot_head.iter_mut().enumerate().take(k) {
                    if !detail.clamped[j] {
                        *item += 0.5;
                    }
                }
            }
            CovHead::Cholesky(_) => {
                for j in 0..k {
                    if !detail.clamped[tri_index(j, j)] {
                        cot_head[tri_index(j, j)] += 1.0;
                    }
                }
            }
        }
        grad_theta += score_acc;
        let (gm, _) = mlp_grad(&mean_params, x, &cot_eta)?;
        let (gh, _) = mlp_grad(&head_params, x, &cot_head)?;
        grad_phi_mean += gm;
        grad_phi_head += gh;
    }

    let n = batch.len() as f64;
    grad_theta /= n;
    grad_phi_mean /= n;
    grad_phi_head /= n;

    let mut grad_phi = Vector::zeros(phi.len());
    grad_phi
        .rows_mut(0, grad_phi_mean.len())
        .copy_from(&grad_phi_mean);
    grad_phi
        .rows_mut(grad_phi_mean.len(), grad_phi_head.len())
        .copy_from(&grad_phi_head);
    Ok((grad_theta, grad_phi))
}

#[derive(Clone, Debug)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma_theta: f64,
    pub gamma_phi: f64,
    /// Draws per datum when estimating batch gradients.
    pub train_samples: usize,
    /// Draws per datum for the end-of-epoch bound evaluation.
    pub eval_samples: usize,
    /// Rescale both updates with adaptive moments instead of plain steps.
    pub adaptive: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            epochs: 50,
            batch_size: 64,
            gamma_theta: 1e-2,
            gamma_phi: 1e-2,
            train_samples: 8,
            eval_samples: 64,
            adaptive: false,
        }
    }
}

/// Joint trainer state: model parameters, encoder parameters, and the
/// per-epoch totals of the amortized bound over the whole training set.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeState {
    pub theta: Vector,
    pub phi: Vector,
    pub elbo_trace: Vec<f64>,
}

fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Stochastic ascent on θ and φ simultaneously. Each epoch shuffles the
/// data with a seeded permutation and walks it in minibatches without
/// replacement; every batch gets its own derived stream, so a run is a pure
/// function of (data, initial point, config, seed). A non-finite gradient,
/// update, or epoch evaluation aborts with the last finite state attached.
pub fn train_vae(
    model: &dyn LatentModel,
    enc: &Encoder,
    data: &[Vector],
    theta0: &Vector,
    phi0: &Vector,
    config: &VaeConfig,
    rng: &mut RngStream,
) -> Result<VaeState, AmortizedError> {
    check_compat(model, enc)?;
    if data.is_empty() {
        return Err(AmortizedError::Spec("training data is empty".into()));
    }
    if theta0.len() != model.param_len() {
        return Err(AmortizedError::Spec(format!(
            "theta has {} entries, model expects {}",
            theta0.len(),
            model.param_len()
        )));
    }
    if config.batch_size == 0 {
        return Err(AmortizedError::Spec("batch size must be positive".into()));
    }
    enc.split(phi0)?;

    let n = data.len();
    let n_batches = n.div_ceil(config.batch_size);
    let mut theta = theta0.clone();
    let mut phi = phi0.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut adam_theta = Adam::new(theta.len());
    let mut adam_phi = Adam::new(phi.len());

    for epoch in 0..config.epochs {
        let epoch_stream = rng.substream(epoch as u64);
        let mut shuffle_rng = epoch_stream.substream(0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.below(i + 1);
            order.swap(i, j);
        }
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch_rng = epoch_stream.substream(1 + b as u64);
            let batch: Vec<Vector> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (gt, gp) = grad_joint(model, &theta, enc, &phi, &batch, config.train_samples, &mut batch_rng)?;
            let diverged = |theta: &Vector, phi: &Vector, trace: &[f64]| AmortizedError::Diverged {
                epoch,
                batch: b,
                state: Box::new(VaeState {
                    theta: theta.clone(),
                    phi: phi.clone(),
                    elbo_trace: trace.to_vec(),
                }),
            };
            if !all_finite(&gt) || !all_finite(&gp) {
                return Err(diverged(&theta, &phi, &trace));
            }
            let (dt, dp) = if config.adaptive {
                (adam_theta.direction(&gt), adam_phi.direction(&gp))
            } else {
                (gt, gp)
            };
            let theta_next = &theta + dt * config.gamma_theta;
            let phi_next = &phi + dp * config.gamma_phi;
            if !all_finite(&theta_next) || !all_finite(&phi_next) {
                return Err(diverged(&theta, &phi, &trace));
            }
            theta = theta_next;
            phi = phi_next;
        }
        let mut eval_rng = epoch_stream.substream(1 + n_batches as u64);
        let mut total = 0.0;
        for x in data {
            total += elbo_a_estimate(model, &theta, enc, &phi, x, config.eval_samples, &mut eval_rng)?;
        }
        if !total.is_finite() {
            return Err(AmortizedError::Diverged {
                epoch,
                batch: n_batches,
                state: Box::new(VaeState {
                    theta,
                    phi,
                    elbo_trace: trace,
                }),
            });
        }
        trace.push(total);
    }
    Ok(VaeState {
        theta,
        phi,
        elbo_trace: trace,
    })
}

/// Outcome of an amortization-gap measurement for one datum.
#[derive(Clone, Debug)]
pub struct GapReport {
    /// Locally refined bound minus amortized bound.
    pub gap: f64,
    /// Standard error of the gap (both terms estimated independently).
    pub se: f64,
    pub elbo_local: f64,
    pub elbo_amortized: f64,
    /// The refined per-datum variational parameters.
    pub local: MeanFieldParams,
    /// Refinement steps that were actually granted.
    pub budget: usize,
}

/// Measures how much bound is lost by amortizing: runs `budget` steps of
/// per-datum refinement seeded at the encoder's output, then compares the
/// refined bound against the amortized bound, both with
/// `GAP_EVAL_SAMPLES` draws on independent streams.
pub fn amortization_gap_report(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    x: &Vector,
    budget: usize,
    rng: &mut RngStream,
) -> Result<GapReport, AmortizedError> {
    check_compat(model, enc)?;
    let init = encode(enc, phi, x)?.as_mean_field();
    let mut fit_rng = rng.substream(0);
    let local = meanfield::fit_local(
        model,
        theta,
        x,
        &init,
        budget,
        GAP_FIT_GAMMA,
        GAP_FIT_SAMPLES,
        &mut fit_rng,
    )?;
    let mut local_rng = rng.substream(1);
    let local_samples =
        meanfield::elbo_samples(model, theta, &local, x, GAP_EVAL_SAMPLES, &mut local_rng);
    let mut amortized_rng = rng.substream(2);
    let amortized_samples =
        elbo_a_samples(model, theta, enc, phi, x, GAP_EVAL_SAMPLES, &mut amortized_rng)?;
    let elbo_local = stats::mean(&local_samples);
    let elbo_amortized = stats::mean(&amortized_samples);
    let se = (stats::se_mean(&local_samples).powi(2)
        + stats::se_mean(&amortized_samples).powi(2))
    .sqrt();
    Ok(GapReport {
        gap: elbo_local - elbo_amortized,
        se,
        elbo_local,
        elbo_amortized,
        local,
        budget,
    })
}

/// The scalar amortization gap; see [`amortization_gap_report`].
pub fn amortization_gap(
    model: &dyn LatentModel,
    theta: &Vector,
    enc: &Encoder,
    phi: &Vector,
    x: &Vector,
    budget: usize,
    rng: &mut RngStream,
) -> Result<f64, AmortizedError> {
    Ok(amortization_gap_report(model, theta, enc, phi, x, budget, rng)?.gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;
    use crate::meanfield::elbo_analytic_lg;
    use crate::models::{lg_log_marginal, lg_posterior, LgFamily, LinearGaussianModel, NlFamily};
    use crate::numkit::{finite_diff_grad, kl_gaussian_dense, rel_error};

    fn lg_d2() -> (LinearGaussianModel, LgFamily) {
        let w = Matrix::from_column_slice(2, 1, &[1.0, -0.7]);
        let mu = Vector::from_column_slice(&[0.5, -0.2]);
        let model = LinearGaussianModel::new(w, mu, 0.4).unwrap();
        (model, LgFamily::new(2, 1))
    }

    fn lg_d3() -> (LinearGaussianModel, LgFamily) {
        let w = Matrix::from_column_slice(3, 1, &[0.9, -0.6, 0.3]);
        let mu = Vector::from_column_slice(&[0.4, -0.2, 0.1]);
        let model = LinearGaussianModel::new(w, mu, 0.3).unwrap();
        (model, LgFamily::new(3, 1))
    }

    fn affine_encoder(d: usize) -> Encoder {
        let mean = MlpSpec::new(&[d, 1], Activation::Tanh).unwrap();
        let logv = MlpSpec::new(&[d, 1], Activation::Tanh).unwrap();
        Encoder::diagonal(mean, logv).unwrap()
    }

    /// Weights and bias of a single-layer net that reproduces the exact
    /// posterior of a k=1 linear-Gaussian model: the posterior mean is
    /// affine in x and the posterior variance is constant.
    fn posterior_phi(model: &LinearGaussianModel, enc: &Encoder) -> Vector {
        let d = model.data_dim();
        let precision = 1.0 + model.loading().norm_squared() / model.noise_var();
        let s2 = 1.0 / precision;
        let row = model.loading().transpose() * (s2 / model.noise_var());
        let mut phi = Vector::zeros(enc.param_len());
        for c in 0..d {
            phi[c] = row[(0, c)];
        }
        phi[d] = -(row * model.offset())[(0, 0)];
        // log-variance net: zero weights, constant bias ln s².
        phi[(d + 1) + d] = s2.ln();
        phi
    }

    #[test]
    fn encoder_construction_validates_shapes() {
        let mean = MlpSpec::new(&[3, 2], Activation::Tanh).unwrap();
        let bad_input = MlpSpec::new(&[2, 2], Activation::Tanh).unwrap();
        assert!(Encoder::diagonal(mean.clone(), bad_input).is_err());
        let bad_out = MlpSpec::new(&[3, 4], Activation::Tanh).unwrap();
        assert!(Encoder::diagonal(mean.clone(), bad_out).is_err());
        let good_tri = MlpSpec::new(&[3, 3], Activation::Tanh).unwrap();
        assert!(Encoder::cholesky(mean.clone(), good_tri).is_ok());
        let bad_tri = MlpSpec::new(&[3, 2], Activation::Tanh).unwrap();
        assert!(Encoder::cholesky(mean, bad_tri).is_err());
    }

    #[test]
    fn zero_parameters_encode_standard_normal() {
        let enc = affine_encoder(2);
        let phi = Vector::zeros(enc.param_len());
        let x = Vector::from_column_slice(&[0.3, -1.1]);
        let e = encode(&enc, &phi, &x).unwrap();
        assert_eq!(e.mean, Vector::zeros(1));
        assert_eq!(e.marginal_stddev(), Vector::from_element(1, 1.0));

        let mean = MlpSpec::new(&[2, 2], Activation::Tanh).unwrap();
        let tri = MlpSpec::new(&[2, 3], Activation::Tanh).unwrap();
        let chol = Encoder::cholesky(mean, tri).unwrap();
        let phi = Vector::zeros(chol.param_len());
        let e = encode(&chol, &phi, &x).unwrap();
        match &e.scale {
            Scale::Chol(l) => assert_eq!(*l, Matrix::identity(2, 2)),
            _ => panic!("expected dense scale"),
        }
        assert!((e.entropy() - (1.0 + LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn encoding_is_a_function_of_the_input() {
        let enc = affine_encoder(2);
        let mut rng = RngStream::new(11, 0);
        let phi = enc.init(&mut rng);
        let x = Vector::from_column_slice(&[0.4, 0.9]);
        let a = encode(&enc, &phi, &x).unwrap();
        let b = encode(&enc, &phi, &x).unwrap();
        assert_eq!(a, b);
        let y = Vector::from_column_slice(&[-1.0, 0.2]);
        let c = encode(&enc, &phi, &y).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn cholesky_identity_pattern_matches_diagonal() {
        // Head nets with zero weights and hand-set biases so the dense
        // factor is exactly diag(exp(o/2)) for the same o the diagonal
        // head produces.
        let d = 2;
        let k = 2;
        let mean_spec = MlpSpec::new(&[d, k], Activation::Tanh).unwrap();
        let o = [-0.3, 0.8];

        let diag = Encoder::diagonal(
            mean_spec.clone(),
            MlpSpec::new(&[d, k], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut phi_diag = Vector::zeros(diag.param_len());
        phi_diag[0] = 0.7; // one nonzero mean weight to make η informative
        let ml = mean_spec.param_len();
        phi_diag[ml + d * k] = o[0];
        phi_diag[ml + d * k + 1] = o[1];

        let chol = Encoder::cholesky(
            mean_spec.clone(),
            MlpSpec::new(&[d, 3], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut phi_chol = Vector::zeros(chol.param_len());
        phi_chol[0] = 0.7;
        // Stored diagonal entries are log-scales, i.e. half the log-variance.
        phi_chol[ml + d * 3 + tri_index(0, 0)] = 0.5 * o[0];
        phi_chol[ml + d * 3 + tri_index(1, 1)] = 0.5 * o[1];

        let x = Vector::from_column_slice(&[0.6, -0.4]);
        let ed = encode(&diag, &phi_diag, &x).unwrap();
        let ec = encode(&chol, &phi_chol, &x).unwrap();
        assert_eq!(ed.mean, ec.mean);
        assert!((ed.entropy() - ec.entropy()).abs() < 1e-12);
        assert!((ed.marginal_stddev() - ec.marginal_stddev()).norm() < 1e-12);

        // Same draws, same bound samples: both scale forms consume k
        // normals per draw in the same order.
        let mean_spec_dec = MlpSpec::new(&[k, 4, d], Activation::Tanh).unwrap();
        let logv_dec = MlpSpec::new(&[k, 3, 1], Activation::Tanh).unwrap();
        let family = NlFamily::new(mean_spec_dec, logv_dec).unwrap();
        let mut rng = RngStream::new(21, 0);
        let theta = family.init(&mut rng);
        let mut ra = RngStream::new(33, 0);
        let mut rb = RngStream::new(33, 0);
        let va = elbo_a_samples(&family, &theta, &diag, &phi_diag, &x, 64, &mut ra).unwrap();
        let vb = elbo_a_samples(&family, &theta, &chol, &phi_chol, &x, 64, &mut rb).unwrap();
        for (a, b) in va.iter().zip(vb.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_posterior_encoder_is_tight() {
        let (model, family) = lg_d3();
        let theta = family.pack(&model);
        let enc = affine_encoder(3);
        let phi = posterior_phi(&model, &enc);
        let mut rng = RngStream::new(41, 0);
        for _ in 0..20 {
            let x = rng.sample_std_normal(3);
            let mf = encode(&enc, &phi, &x).unwrap().as_mean_field();
            let analytic = elbo_analytic_lg(&model, &mf, &x);
            let marginal = lg_log_marginal(&model, &x).unwrap();
            assert!(
                (analytic - marginal).abs() < 1e-9,
                "bound {analytic} vs marginal {marginal}"
            );
        }
        // Monte Carlo wiring agrees with the analytic value.
        let x = Vector::from_column_slice(&[1.1, -0.3, 0.5]);
        let samples = elbo_a_samples(&family, &theta, &enc, &phi, &x, 2048, &mut rng).unwrap();
        let est = stats::mean(&samples);
        let se = stats::se_mean(&samples);
        let marginal = lg_log_marginal(&model, &x).unwrap();
        assert!(
            (est - marginal).abs() <= 3.0 * se,
            "estimate {est} vs marginal {marginal} (se {se})"
        );
    }

    #[test]
    fn elbo_a_identity_matches_marginal_minus_kl() {
        let (model, _) = lg_d2();
        let enc = affine_encoder(2);
        let mut rng = RngStream::new(43, 0);
        for _ in 0..20 {
            let phi = enc.init(&mut rng);
            let x = rng.sample_std_normal(2);
            let encoded = encode(&enc, &phi, &x).unwrap();
            let analytic = elbo_analytic_lg(&model, &encoded.as_mean_field(), &x);
            let post = lg_posterior(&model, &x).unwrap();
            let q_cov = Matrix::from_diagonal(&encoded.marginal_stddev().map(|s| s * s));
            let kl = kl_gaussian_dense(&encoded.mean, &q_cov, post.mean(), post.cov()).unwrap();
            let marginal = lg_log_marginal(&model, &x).unwrap();
            assert!(
                (analytic - (marginal - kl)).abs() < 1e-8,
                "identity off: {} vs {}",
                analytic,
                marginal - kl
            );
        }
    }

    #[test]
    fn elbo_a_never_exceeds_marginal() {
        let (model, family) = lg_d2();
        let theta = family.pack(&model);
        let enc = affine_encoder(2);
        let mut rng = RngStream::new(47, 0);
        for trial in 0..20 {
            let phi = enc.init(&mut rng) * 1.5;
            let x = rng.sample_std_normal(2);
            let samples = elbo_a_samples(&family, &theta, &enc, &phi, &x, 256, &mut rng).unwrap();
            let est = stats::mean(&samples);
            let se = stats::se_mean(&samples);
            let marginal = lg_log_marginal(&model, &x).unwrap();
            assert!(
                est <= marginal + 3.0 * se,
                "trial {trial}: estimate {est} above marginal {marginal} (se {se})"
            );
        }
    }

    #[test]
    fn single_sample_estimates_are_reproducible() {
        let (model, family) = lg_d2();
        let theta = family.pack(&model);
        let enc = affine_encoder(2);
        let mut init_rng = RngStream::new(53, 0);
        let phi = enc.init(&mut init_rng);
        let x = Vector::from_column_slice(&[0.2, 0.9]);
        let a = elbo_a_estimate(&family, &theta, &enc, &phi, &x, 1, &mut RngStream::new(7, 3)).unwrap();
        let b = elbo_a_estimate(&family, &theta, &enc, &phi, &x, 1, &mut RngStream::new(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_gradient_averages_per_datum_contributions() {
        let (model, family) = lg_d2();
        let theta = family.pack(&model);
        let enc = affine_encoder(2);
        let mut init_rng = RngStream::new(59, 0);
        let phi = enc.init(&mut init_rng);
        let x1 = Vector::from_column_slice(&[0.4, -0.8]);
        let x2 = Vector::from_column_slice(&[-1.3, 0.6]);
        let batch = vec![x1.clone(), x2.clone()];
        let mut rng = RngStream::new(61, 0);
        let mut replay = rng.clone();
        let (gt, gp) = grad_joint(&family, &theta, &enc, &phi, &batch, 4, &mut rng).unwrap();
        let (gt1, gp1) = grad_joint(&family, &theta, &enc, &phi, &[x1], 4, &mut replay).unwrap();
        let (gt2, gp2) = grad_joint(&family, &theta, &enc, &phi, &[x2], 4, &mut replay).unwrap();
        assert!((&gt - (gt1 + gt2) * 0.5).norm() < 1e-12);
        assert!((&gp - (gp1 + gp2) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn joint_gradient_matches_finite_differences_diagonal() {
        let mean_dec = MlpSpec::new(&[1, 4, 2], Activation::Tanh).unwrap();
        let logv_dec = MlpSpec::new(&[1, 3, 1], Activation::Tanh).unwrap();
        let family = NlFamily::new(mean_dec, logv_dec).unwrap();
        let enc = Encoder::diagonal(
            MlpSpec::new(&[2, 4, 1], Activation::Tanh).unwrap(),
            MlpSpec::new(&[2, 3, 1], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut rng = RngStream::new(67, 0);
        for trial in 0..5 {
            let theta = family.init(&mut rng);
            let phi = enc.init(&mut rng);
            let batch: Vec<Vector> = (0..3).map(|_| rng.sample_std_normal(2)).collect();
            let base = rng.substream(100 + trial);
            let (gt, gp) = grad_joint(&family, &theta, &enc, &phi, &batch, 3, &mut base.clone()).unwrap();
            let fd_t = finite_diff_grad(
                |t| batch_elbo_a(&family, t, &enc, &phi, &batch, 3, &mut base.clone()).unwrap(),
                &theta,
                1e-5,
            );
            let fd_p = finite_diff_grad(
                |p| batch_elbo_a(&family, &theta, &enc, p, &batch, 3, &mut base.clone()).unwrap(),
                &phi,
                1e-5,
            );
            assert!(
                rel_error(&gt, &fd_t) < 1e-4,
                "trial {trial}: theta gradient off by {}",
                rel_error(&gt, &fd_t)
            );
            assert!(
                rel_error(&gp, &fd_p) < 1e-4,
                "trial {trial}: phi gradient off by {}",
                rel_error(&gp, &fd_p)
            );
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences_cholesky() {
        let mean_dec = MlpSpec::new(&[2, 4, 2], Activation::Tanh).unwrap();
        let logv_dec = MlpSpec::new(&[2, 3, 1], Activation::Tanh).unwrap();
        let family = NlFamily::new(mean_dec, logv_dec).unwrap();
        let enc = Encoder::cholesky(
            MlpSpec::new(&[2, 4, 2], Activation::Tanh).unwrap(),
            MlpSpec::new(&[2, 4, 3], Activation::Tanh).unwrap(),
        )
        .unwrap();
        let mut rng = RngStream::new(71, 0);
        for trial in 0..5 {
            let theta = family.init(&mut rng);
            let phi = enc.init(&mut rng);
            let batch: Vec<Vector> = (0..2).map(|_| rng.sample_std_normal(2)).collect();
            let base = rng.substream(200 + trial);
            let (_, gp) = grad_joint(&family, &theta, &enc, &phi, &batch, 3, &mut base.clone()).unwrap();
            let fd_p = finite_diff_grad(
                |p| batch_elbo_a(&family, &theta, &enc, p, &batch, 3, &mut base.clone()).unwrap(),
                &phi,
                1e-5,
            );
            assert!(
                rel_error(&gp, &fd_p) < 1e-4,
                "trial {trial}: dense-head phi gradient off by {}",
                rel_error(&gp, &fd_p)
            );
        }
    }

    /// For an affine encoder on a linear-Gaussian model the expected bound
    /// gradient has a closed form; the pathwise estimator must average to it.
    #[test]
    fn pathwise_gradient_is_unbiased_for_linear_model() {
        let (model, family) = lg_d2();
        let theta = family.pack(&model);
        let enc = affine_encoder(2);
        let mut phi = Vector::zeros(enc.param_len());
        phi[0] = 0.3;
        phi[1] = -0.2;
        phi[2] = 0.1; // mean bias
        phi[3] = 0.05;
        phi[4] = 0.1;
        phi[5] = -0.4; // log-variance bias
        let x = Vector::from_column_slice(&[0.7, -1.2]);

        let eta = phi[0] * x[0] + phi[1] * x[1] + phi[2];
        let o = phi[3] * x[0] + phi[4] * x[1] + phi[5];
        let var = o.exp();
        let w = model.loading();
        let resid = &x - model.offset() - w * Vector::from_element(1, eta);
        let g_eta = -eta + (w.transpose() * &resid)[(0, 0)] / model.noise_var();
        let g_o = var * (-0.5 - w.norm_squared() / (2.0 * model.noise_var())) + 0.5;
        let expected = Vector::from_column_slice(&[
            g_eta * x[0],
            g_eta * x[1],
            g_eta,
            g_o * x[0],
            g_o * x[1],
            g_o,
        ]);

        let reps = 10_000;
        let base = RngStream::new(73, 0);
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); 6];
        let batch = [x.clone()];
        for r in 0..reps {
            let mut rep_rng = base.substream(r as u64);
            let (_, gp) = grad_joint(&family, &theta, &enc, &phi, &batch, 1, &mut rep_rng).unwrap();
            for c in 0..6 {
                per_coord[c].push(gp[c]);
            }
        }
        for c in 0..6 {
            let est = stats::mean(&per_coord[c]);
            let se = stats::se_mean(&per_coord[c]);
            assert!(
                (est - expected[c]).abs() <= 3.0 * se,
                "coordinate {c}: estimate {est} vs expected {} (se {se})",
                expected[c]
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_posterior_encoder() {
        let (model, family) = lg_d3();
        let theta = family.pack(&model);
        let enc = affine_encoder(3);
        let phi = posterior_phi(&model, &enc);
        let x = Vector::from_column_slice(&[0.9, -0.5, 1.2]);
        let batch = [x];
        let reps = 4000;
        let base = RngStream::new(79, 0);
        let k = enc.param_len();
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); k];
        for r in 0..reps {
            let mut rep_rng = base.substream(r as u64);
            let (_, gp) = grad_joint(&family, &theta, &enc, &phi, &batch, 1, &mut rep_rng).unwrap();
            for c in 0..k {
                per_coord[c].push(gp[c]);
            }
        }
        for (c, vals) in per_coord.iter().enumerate() {
            let est = stats::mean(vals);
            let se = stats::se_mean(vals);
            assert!(
                est.abs() <= 3.0 * se.max(1e-12),
                "coordinate {c}: gradient {est} not within noise of zero (se {se})"
            );
        }
    }

    #[test]
    fn log_variance_clamp_saturates_and_freezes_gradient() {
        let (model, family) = lg_d2();
        let theta = family.pack(&model);
        let enc = affine_encoder(2);
        let mut phi = Vector::zeros(enc.param_len());
        phi[5] = 40.0; // log-variance bias far beyond the clamp
        let x = Vector::from_column_slice(&[0.1, 0.2]);
        enc.reset_saturation_count();
        let e = encode(&enc, &phi, &x).unwrap();
        assert!(enc.saturation_count() > 0);
        assert!((e.marginal_stddev()[0] - (5.0f64).exp()).abs() < 1e-12);
        let (_, gp) = grad_joint(&family, &theta, &enc, &phi, &[x], 8, &mut RngStream::new(83, 0)).unwrap();
        // Every log-variance head parameter is frozen while clamped.
        for c in 3..6 {
            assert_eq!(gp[c], 0.0, "clamped head coordinate {c} should not move");
        }
    }

    #[test]
    fn training_improves_the_bound() {
        let (truth, family) = lg_d2();
        let mut data_rng = RngStream::new(101, 0);
        let theta_truth = family.pack(&truth);
        let data: Vec<Vector> = (0..128)
            .map(|_| {
                let z = family.sample_prior(&theta_truth, &mut data_rng);
                family.sample_decoder(&theta_truth, &z, &mut data_rng)
            })
            .collect();

        let perturbed = LinearGaussianModel::new(
            Matrix::from_column_slice(2, 1, &[0.4, -0.2]),
            Vector::from_column_slice(&[0.0, 0.0]),
            1.0,
        )
        .unwrap();
        let theta0 = family.pack(&perturbed);
        let enc = affine_encoder(2);
        let phi0 = Vector::zeros(enc.param_len());
        let config = VaeConfig {
            epochs: 40,
            batch_size: 64,
            gamma_theta: 2e-2,
            gamma_phi: 2e-2,
            train_samples: 8,
            eval_samples: 32,
            adaptive: false,
        };
        let mut rng = RngStream::new(103, 0);
        let state = train_vae(&family, &enc, &data, &theta0, &phi0, &config, &mut rng).unwrap();
        assert_eq!(state.elbo_trace.len(), 40);
        let first = state.elbo_trace[0];
        let last = *state.elbo_trace.last().unwrap();
        assert!(last > first, "bound did not improve: {first} -> {last}");

        // Smoothed trace is non-decreasing up to a small tolerance.
        let window = 5;
        let smoothed: Vec<f64> = state
            .elbo_trace
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        let range = last - first;
        for pair in smoothed.windows(2) {
            assert!(
                pair[1] >= pair[0] - 0.05 * range.abs(),
                "smoothed trace dipped: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_stepless_when_gamma_zero() {
        let (truth, family) = lg_d2();
        let theta_truth = family.pack(&truth);
        let mut data_rng = RngStream::new(107, 0);
        let data: Vec<Vector> = (0..40)
            .map(|_| {
                let z = family.sample_prior(&theta_truth, &mut data_rng);
                family.sample_decoder(&theta_truth, &z, &mut data_rng)
            })
            .collect();
        let enc = affine_encoder(2);
        let mut init_rng = RngStream::new(109, 0);
        let phi0 = enc.init(&mut init_rng);
        let config = VaeConfig {
            epochs: 5,
            batch_size: 16,
            ..VaeConfig::default()
        };
        let a = train_vae(&family, &enc, &data, &theta_truth, &phi0, &config, &mut RngStream::new(9, 1)).unwrap();
        let b = train_vae(&family, &enc, &data, &theta_truth, &phi0, &config, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a, b);

        let frozen = VaeConfig {
            gamma_theta: 0.0,
            gamma_phi: 0.0,
            ..config
        };
        let c = train_vae(&family, &enc, &data, &theta_truth, &phi0, &frozen, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(c.theta, theta_truth);
        assert_eq!(c.phi, phi0);
        assert_eq!(c.elbo_trace.len(), 5);
    }

    #[test]
    fn divergence_is_reported_with_last_finite_state() {
        let (truth, family) = lg_d2();
        let theta0 = family.pack(&truth);
        let mut data_rng = RngStream::new(113, 0);
        let data: Vec<Vector> = (0..8)
            .map(|_| data_rng.sample_std_normal(2))
            .collect();
        let enc = affine_encoder(2);
        let phi0 = Vector::zeros(enc.param_len());
        let config = VaeConfig {
            epochs: 3,
            batch_size: 8,
            gamma_theta: f64::MAX,
            gamma_phi: 1e-2,
            ..VaeConfig::default()
        };
        let err = train_vae(&family, &enc, &data, &theta0, &phi0, &config, &mut RngStream::new(5, 5))
            .unwrap_err();
        match err {
            AmortizedError::Diverged { epoch, batch, state } => {
                assert_eq!(epoch, 0);
                assert_eq!(batch, 0);
                assert!(all_finite(&state.theta));
                assert!(all_finite(&state.phi));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn amortization_gap_near_zero_for_matched_encoder() {
        let (model, family) = lg_d3();
        let theta = family.pack(&model);
        let enc = affine_encoder(3);
        let phi = posterior_phi(&model, &enc);
        let x = Vector::from_column_slice(&[0.8, -0.1, 0.4]);
        let mut rng = RngStream::new(127, 0);
        let report =
            amortization_gap_report(&family, &theta, &enc, &phi, &x, DEFAULT_GAP_BUDGET, &mut rng)
                .unwrap();
        assert_eq!(report.budget, DEFAULT_GAP_BUDGET);
        assert!(
            report.gap.abs() <= 3.0 * report.se,
            "gap {} larger than noise (se {})",
            report.gap,
            report.se
        );
    }

    #[test]
    fn amortization_gap_positive_for_perturbed_encoder() {
        let (model, family) = lg_d3();
        let theta = family.pack(&model);
        let enc = affine_encoder(3);
        let mut phi = posterior_phi(&model, &enc);
        phi[3] += 0.5; // shift the mean bias away from the posterior
        let x = Vector::from_column_slice(&[0.8, -0.1, 0.4]);
        let mut rng = RngStream::new(131, 0);
        let report =
            amortization_gap_report(&family, &theta, &enc, &phi, &x, DEFAULT_GAP_BUDGET, &mut rng)
                .unwrap();
        assert!(
            report.gap > 2.0 * report.se && report.gap > 0.05,
            "expected a clearly positive gap, got {} (se {})",
            report.gap,
            report.se
        );
    }

    #[test]
    fn amortization_gap_not_spuriously_negative() {
        let (model, family) = lg_d3();
        let theta = family.pack(&model);
        let enc = affine_encoder(3);
        let mut rng = RngStream::new(137, 0);
        for trial in 0..10 {
            let phi = enc.init(&mut rng);
            let x = rng.sample_std_normal(3);
            let mut gap_rng = rng.substream(300 + trial);
            let report =
                amortization_gap_report(&family, &theta, &enc, &phi, &x, 400, &mut gap_rng).unwrap();
            assert!(
                report.gap >= -3.0 * report.se,
                "trial {trial}: gap {} below -3 se ({})",
                report.gap,
                report.se
            );
        }
    }
}
