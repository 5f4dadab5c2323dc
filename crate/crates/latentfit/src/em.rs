//! EM and Monte Carlo EM drivers over tractable latent-variable models,
//! plus the regularized-Q diagnostics that certify the monotonicity
//! argument behind them.
//!
//! The Q-function is the expected complete log-likelihood under the
//! current conditional,
//!
//! ```text
//!   Q(θ; θ_t | x) = E_{Z ~ p_{θ_t}(z|x)} [ ℓ(θ | x, Z) ],
//! ```
//!
//! and the regularized form restores the entropy term:
//!
//! ```text
//!   Q*(θ; θ_t | x) = Q(θ; θ_t | x) + H(p_{θ_t}(·|x))
//!                  = ℓ(θ | x) − KL(p_{θ_t}(·|x) ‖ p_θ(·|x)).
//! ```
//!
//! The second identity is what makes EM monotone: maximizing Q over θ
//! cannot decrease ℓ because the KL term is zero at θ = θ_t and
//! non-negative everywhere.

use crate::models::{
    gmm_responsibilities, lg_posterior, one_hot, GaussianMixtureModel, GmmFamily, LatentKind,
    LatentModel, LinearGaussianModel, ModelError, GMM_VARIANCE_FLOOR,
};
use crate::numkit::{stats, NumError, QuadGrid, RngStream};
use crate::{Matrix, Vector};

/// A component's total responsibility below this is treated as empty and
/// the component is re-seeded from a random data point.
pub const EMPTY_COMPONENT_TOL: f64 = 1e-12;

/// Stopping rule for [`run_em`]: stop when `|Δℓ| < tol·(1 + |ℓ|)` or after
/// `max_iter` steps. `tol = 0` disables the relative test and always runs
/// the full budget.
#[derive(Clone, Copy, Debug)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// Record of an EM run: the parameter iterates θ^(0..t), the observed
/// log-likelihood at each iterate, and the per-transition KL penalty
/// Σ_i KL(p_{θ_t}(·|X_i) ‖ p_{θ_{t+1}}(·|X_i)).
#[derive(Clone, Debug)]
pub struct EmTrace {
    /// Packed θ^(0), …, θ^(T).
    pub iterates: Vec<Vector>,
    /// ℓ_n(θ^(t)) for each iterate; same length as `iterates`.
    pub loglik: Vec<f64>,
    /// KL penalty for each transition; length `iterates.len() - 1`.
    pub kl_penalty: Vec<f64>,
    /// `(iteration, component)` pairs where an empty component was
    /// re-seeded from a random data point.
    pub reseeds: Vec<(usize, usize)>,
    /// Whether the relative-change stopping rule fired before `max_iter`.
    pub converged: bool,
}

impl EmTrace {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik.last().expect("trace is never empty")
    }
}

fn pooled_variance(data: &[Vector]) -> f64 {
    let n = data.len() as f64;
    let d = data[0].len() as f64;
    let mut mean = Vector::zeros(data[0].len());
    for x in data {
        mean += x;
    }
    mean /= n;
    let ss: f64 = data.iter().map(|x| (x - &mean).norm_squared()).sum();
    (ss / (n * d)).max(GMM_VARIANCE_FLOOR)
}

/// One EM update for the isotropic Gaussian mixture: responsibilities
/// under `model`, then the exact argmax of Q_n (weighted means, floored
/// weighted variances, mixing weights).
///
/// A component whose total responsibility falls below
/// [`EMPTY_COMPONENT_TOL`] is re-seeded from a random data point (mean at
/// the point, pooled data variance, weight `1/K` before renormalization);
/// the indices of re-seeded components are returned so callers can log
/// them.
pub fn em_step_gmm(
    model: &GaussianMixtureModel,
    data: &[Vector],
    rng: &mut RngStream,
) -> Result<(GaussianMixtureModel, Vec<usize>), ModelError> {
    let n = data.len();
    let k = model.n_components();
    let d = model.dim();
    if n < k {
        return Err(ModelError::Params(format!(
            "EM needs at least as many points as components (n = {n}, K = {k})"
        )));
    }

    let resp: Vec<Vec<f64>> = data.iter().map(|x| gmm_responsibilities(model, x)).collect();
    let totals: Vec<f64> = (0..k).map(|j| resp.iter().map(|r| r[j]).sum()).collect();

    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    let mut weights = vec![0.0; k];
    let mut reseeded = Vec::new();

    for j in 0..k {
        if totals[j] < EMPTY_COMPONENT_TOL {
            reseeded.push(j);
            means.push(data[rng.below(n)].clone());
            variances.push(pooled_variance(data));
            weights[j] = 1.0 / k as f64;
            continue;
        }
        let mut mu = Vector::zeros(d);
        for (x, r) in data.iter().zip(&resp) {
            mu += x * r[j];
        }
        mu /= totals[j];
        let ss: f64 = data
            .iter()
            .zip(&resp)
            .map(|(x, r)| r[j] * (x - &mu).norm_squared())
            .sum();
        means.push(mu);
        variances.push((ss / (d as f64 * totals[j])).max(GMM_VARIANCE_FLOOR));
        weights[j] = totals[j] / n as f64;
    }

    if !reseeded.is_empty() {
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }

    let next = GaussianMixtureModel::new(means, variances, weights)?;
    Ok((next, reseeded))
}

/// k-means++-style seeding: the first center uniformly from the data, each
/// further center with probability proportional to its squared distance to
/// the nearest chosen center. Variances start at the pooled data variance
/// and weights uniform.
pub fn gmm_init_kmeans_pp(
    data: &[Vector],
    components: usize,
    rng: &mut RngStream,
) -> Result<GaussianMixtureModel, ModelError> {
    let n = data.len();
    if components == 0 || n < components {
        return Err(ModelError::Params(format!(
            "initialization needs 1 <= K <= n (n = {n}, K = {components})"
        )));
    }
    let mut centers: Vec<Vector> = vec![data[rng.below(n)].clone()];
    while centers.len() < components {
        let dist2: Vec<f64> = data
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        // All-duplicate data leaves every distance at zero; fall back to a
        // uniform draw rather than letting the weighted draw degenerate.
        let idx = if dist2.iter().sum::<f64>() > 0.0 {
            rng.categorical(&dist2)
        } else {
            rng.below(n)
        };
        centers.push(data[idx].clone());
    }
    let var = pooled_variance(data);
    let weights = vec![1.0 / components as f64; components];
    GaussianMixtureModel::new(centers, vec![var; components], weights)
}

/// Full EM driver for the Gaussian mixture: seeded initialization, EM
/// steps until the relative-change rule in `config` fires, trace of
/// iterates, log-likelihoods and KL penalties.
pub fn run_em(
    data: &[Vector],
    components: usize,
    config: &EmConfig,
    rng: &mut RngStream,
) -> Result<(GaussianMixtureModel, EmTrace), ModelError> {
    let mut model = gmm_init_kmeans_pp(data, components, rng)?;
    let family = GmmFamily::new(components, data[0].len());
    let mut trace = EmTrace {
        iterates: vec![family.pack(&model)],
        loglik: vec![model.total_log_likelihood(data)],
        kl_penalty: Vec::new(),
        reseeds: Vec::new(),
        converged: false,
    };

    for t in 0..config.max_iter {
        let (next, reseeded) = em_step_gmm(&model, data, rng)?;
        for j in reseeded {
            trace.reseeds.push((t, j));
        }
        let kl: f64 = data
            .iter()
            .map(|x| {
                stats::kl_categorical(
                    &gmm_responsibilities(&model, x),
                    &gmm_responsibilities(&next, x),
                )
            })
            .sum();
        trace.kl_penalty.push(kl);
        let ll = next.total_log_likelihood(data);
        let prev = trace.final_loglik();
        trace.iterates.push(family.pack(&next));
        trace.loglik.push(ll);
        model = next;
        if config.tol > 0.0 && (ll - prev).abs() < config.tol * (1.0 + ll.abs()) {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

/// Models with an exactly samplable conditional p_θ(z|x) and a closed-form
/// maximizer of the imputed complete-data log-likelihood — the two
/// ingredients one Monte Carlo EM step needs.
pub trait ExactConditional: Sized {
    /// One draw from p_θ(z|x), in the model's latent encoding.
    fn draw_conditional(&self, x: &Vector, rng: &mut RngStream) -> Result<Vector, ModelError>;

    /// argmax_θ (1/NM) Σ_{i,m} ℓ(θ | x_i, z_{im}) over the imputed
    /// complete data; `draws[i]` holds the imputations for `data[i]`.
    fn complete_data_mle(data: &[Vector], draws: &[Vec<Vector>]) -> Result<Self, ModelError>;
}

impl ExactConditional for GaussianMixtureModel {
    fn draw_conditional(&self, x: &Vector, rng: &mut RngStream) -> Result<Vector, ModelError> {
        let resp = gmm_responsibilities(self, x);
        Ok(one_hot(self.n_components(), rng.categorical(&resp)))
    }

    fn complete_data_mle(data: &[Vector], draws: &[Vec<Vector>]) -> Result<Self, ModelError> {
        let k = draws[0][0].len();
        let d = data[0].len();
        let mut counts = vec![0.0_f64; k];
        let mut sums = vec![Vector::zeros(d); k];
        for (x, zs) in data.iter().zip(draws) {
            for z in zs {
                let j = crate::models::hot_index(z);
                counts[j] += 1.0;
                sums[j] += x;
            }
        }
        if counts.iter().any(|c| *c == 0.0) {
            return Err(ModelError::Params(
                "a mixture component received no imputed draws".into(),
            ));
        }
        let means: Vec<Vector> = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| s / *c)
            .collect();
        let mut ss = vec![0.0_f64; k];
        for (x, zs) in data.iter().zip(draws) {
            for z in zs {
                let j = crate::models::hot_index(z);
                ss[j] += (x - &means[j]).norm_squared();
            }
        }
        let variances: Vec<f64> = ss
            .iter()
            .zip(&counts)
            .map(|(s, c)| (s / (d as f64 * c)).max(GMM_VARIANCE_FLOOR))
            .collect();
        let total: f64 = counts.iter().sum();
        let weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
        GaussianMixtureModel::new(means, variances, weights)
    }
}

impl ExactConditional for LinearGaussianModel {
    fn draw_conditional(&self, x: &Vector, rng: &mut RngStream) -> Result<Vector, ModelError> {
        let post = lg_posterior(self, x)?;
        post.sample(rng).map_err(ModelError::Num)
    }

    /// Least squares of x on (z, 1): solve the normal equations for
    /// [W μ], then σ² is the mean squared residual over all coordinates.
    fn complete_data_mle(data: &[Vector], draws: &[Vec<Vector>]) -> Result<Self, ModelError> {
        let d = data[0].len();
        let k = draws[0][0].len();
        let mut gram = Matrix::zeros(k + 1, k + 1);
        let mut cross = Matrix::zeros(d, k + 1);
        let mut count = 0.0_f64;
        for (x, zs) in data.iter().zip(draws) {
            for z in zs {
                let mut a = Vector::zeros(k + 1);
                a.rows_mut(0, k).copy_from(z);
                a[k] = 1.0;
                gram += &a * a.transpose();
                cross += x * a.transpose();
                count += 1.0;
            }
        }
        let chol = gram.clone().cholesky().ok_or_else(|| {
            ModelError::Num(NumError::NotPositiveDefinite)
        })?;
        // [W μ]ᵀ solves G Bᵀ = Crossᵀ.
        let wb = chol.solve(&cross.transpose()).transpose();
        let w = wb.columns(0, k).into_owned();
        let mu: Vector = wb.column(k).into_owned();
        let mut ss = 0.0;
        for (x, zs) in data.iter().zip(draws) {
            for z in zs {
                ss += (x - &w * z - &mu).norm_squared();
            }
        }
        let sigma2 = (ss / (count * d as f64)).max(GMM_VARIANCE_FLOOR);
        LinearGaussianModel::new(w, mu, sigma2)
    }
}

/// One Monte Carlo EM step: `num_draws` fresh conditional draws per datum
/// under the current model, then the closed-form maximizer of
/// Q̃_M = (1/M) Σ_m ℓ(θ | x, Z̃^(m)).
pub fn mcem_step<Mo: ExactConditional>(
    model: &Mo,
    data: &[Vector],
    num_draws: usize,
    rng: &mut RngStream,
) -> Result<Mo, ModelError> {
    if num_draws == 0 {
        return Err(ModelError::Params("MCEM needs at least one draw".into()));
    }
    let mut draws = Vec::with_capacity(data.len());
    for x in data {
        let mut zs = Vec::with_capacity(num_draws);
        for _ in 0..num_draws {
            zs.push(model.draw_conditional(x, rng)?);
        }
        draws.push(zs);
    }
    Mo::complete_data_mle(data, &draws)
}

fn discrete_complete_logliks(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
    categories: usize,
) -> Vec<f64> {
    (0..categories)
        .map(|j| model.complete_loglik(theta, x, &one_hot(categories, j)))
        .collect()
}

/// Exact conditional p_θ(z = j | x) for a discrete-latent model.
pub fn discrete_posterior(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
) -> Result<Vec<f64>, ModelError> {
    match model.latent_kind() {
        LatentKind::Discrete { categories } => {
            let joint = discrete_complete_logliks(model, theta, x, categories);
            let logz = stats::logsumexp(&joint);
            Ok(joint.iter().map(|lj| (lj - logz).exp()).collect())
        }
        LatentKind::Continuous { .. } => Err(ModelError::Capability {
            model: model.name(),
            op: "discrete_posterior",
        }),
    }
}

/// Observed-data log-likelihood ℓ(θ|x): exact log-sum over categories for
/// discrete latents, quadrature for continuous latents of dimension ≤ 2.
pub fn observed_loglik(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
) -> Result<f64, ModelError> {
    match model.latent_kind() {
        LatentKind::Discrete { categories } => Ok(stats::logsumexp(
            &discrete_complete_logliks(model, theta, x, categories),
        )),
        LatentKind::Continuous { k } => {
            let grid = QuadGrid::standard(k).map_err(ModelError::Num)?;
            crate::models::quadrature_log_marginal(model, theta, x, &grid)
        }
    }
}

/// Q(θ; θ_t | x) = E_{Z ~ p_{θ_t}(z|x)}[ℓ(θ|x,Z)]: exact sum for discrete
/// latents, quadrature against the conditional density for continuous
/// latents of dimension ≤ 2.
pub fn q_function(
    model: &dyn LatentModel,
    theta: &Vector,
    theta_t: &Vector,
    x: &Vector,
) -> Result<f64, ModelError> {
    match model.latent_kind() {
        LatentKind::Discrete { categories } => {
            let post = discrete_posterior(model, theta_t, x)?;
            let joint = discrete_complete_logliks(model, theta, x, categories);
            Ok(post.iter().zip(&joint).map(|(p, l)| p * l).sum())
        }
        LatentKind::Continuous { k } if k <= 2 => {
            let grid = QuadGrid::standard(k).map_err(ModelError::Num)?;
            let logm_t = crate::models::quadrature_log_marginal(model, theta_t, x, &grid)?;
            let mut acc = 0.0;
            grid.for_each_node(|z, w| {
                let p_t = (model.complete_loglik(theta_t, x, z) - logm_t).exp();
                if p_t > 0.0 {
                    acc += w * p_t * model.complete_loglik(theta, x, z);
                }
            });
            Ok(acc)
        }
        LatentKind::Continuous { k } => Err(ModelError::Num(NumError::Unsupported(format!(
            "q_function supports k <= 2, model has k = {k}"
        )))),
    }
}

/// Entropy of the conditional p_θ(·|x), by exact sum or quadrature.
pub fn posterior_entropy(
    model: &dyn LatentModel,
    theta: &Vector,
    x: &Vector,
) -> Result<f64, ModelError> {
    match model.latent_kind() {
        LatentKind::Discrete { .. } => {
            Ok(stats::entropy_categorical(&discrete_posterior(model, theta, x)?))
        }
        LatentKind::Continuous { k } if k <= 2 => {
            let grid = QuadGrid::standard(k).map_err(ModelError::Num)?;
            let logm = crate::models::quadrature_log_marginal(model, theta, x, &grid)?;
            let mut acc = 0.0;
            grid.for_each_node(|z, w| {
                let lp = model.complete_loglik(theta, x, z) - logm;
                let p = lp.exp();
                if p > 0.0 {
                    acc -= w * p * lp;
                }
            });
            Ok(acc)
        }
        LatentKind::Continuous { k } => Err(ModelError::Num(NumError::Unsupported(format!(
            "posterior_entropy supports k <= 2, model has k = {k}"
        )))),
    }
}

/// The regularized log-likelihood
/// Q*(θ; θ_t | x) = ℓ(θ|x) − KL(p_{θ_t}(·|x) ‖ p_θ(·|x)),
/// computed by the decomposition route (it must agree with
/// `q_function + posterior_entropy` to high accuracy).
pub fn regularized_q(
    model: &dyn LatentModel,
    theta: &Vector,
    theta_t: &Vector,
    x: &Vector,
) -> Result<f64, ModelError> {
    match model.latent_kind() {
        LatentKind::Discrete { .. } => {
            let post_t = discrete_posterior(model, theta_t, x)?;
            let post = discrete_posterior(model, theta, x)?;
            Ok(observed_loglik(model, theta, x)? - stats::kl_categorical(&post_t, &post))
        }
        LatentKind::Continuous { k } if k <= 2 => {
            let grid = QuadGrid::standard(k).map_err(ModelError::Num)?;
            let logm_t = crate::models::quadrature_log_marginal(model, theta_t, x, &grid)?;
            let logm = crate::models::quadrature_log_marginal(model, theta, x, &grid)?;
            let mut kl = 0.0;
            grid.for_each_node(|z, w| {
                let lp_t = model.complete_loglik(theta_t, x, z) - logm_t;
                let p_t = lp_t.exp();
                if p_t > 0.0 {
                    let lp = model.complete_loglik(theta, x, z) - logm;
                    kl += w * p_t * (lp_t - lp);
                }
            });
            Ok(logm - kl)
        }
        LatentKind::Continuous { k } => Err(ModelError::Num(NumError::Unsupported(format!(
            "regularized_q supports k <= 2, model has k = {k}"
        )))),
    }
}

/// Σ_i Q*(θ; θ_t | x_i) over a data set.
pub fn regularized_q_total(
    model: &dyn LatentModel,
    theta: &Vector,
    theta_t: &Vector,
    data: &[Vector],
) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for x in data {
        acc += regularized_q(model, theta, theta_t, x)?;
    }
    Ok(acc)
}
