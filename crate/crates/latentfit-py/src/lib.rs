//! Python bindings for the latentfit core: the mixture/EM path, the
//! linear-Gaussian family with variational refinement, the denoising
//! trainer/sampler, and the self-audit entry points. Vectors cross the
//! boundary as plain lists; everything that draws randomness takes an
//! explicit seed.

use latentfit::ddm::{
    sample_reverse, schedule_make, simple_loss, train_ddm, DdmConfig, NoisePredictor,
    ScheduleKind, VarianceSchedule,
};
use latentfit::diffnet::Activation;
use latentfit::em::{em_step_gmm, gmm_init_kmeans_pp};
use latentfit::harness::dataset::{gen_data as harness_gen_data, truth_for, DataSpec, Truth};
use latentfit::harness::verify::{run_gradcheck, run_suite, Suite};
use latentfit::meanfield::{elbo_analytic_lg, elbo_estimate, fit_local, MeanFieldParams};
use latentfit::models::{
    lg_log_marginal, lg_posterior, GaussianMixtureModel, GmmFamily, LatentModel, LgFamily,
    LinearGaussianModel,
};
use latentfit::numkit::{Matrix, RngStream, Vector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vector(v: Vec<f64>) -> Vector {
    Vector::from_vec(v)
}

fn from_vector(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn to_data(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vector>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("data must be non-empty"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("data rows have uneven lengths"));
    }
    Ok(rows.into_iter().map(Vector::from_vec).collect())
}

fn from_data(rows: &[Vector]) -> Vec<Vec<f64>> {
    rows.iter().map(from_vector).collect()
}

/// Isotropic Gaussian mixture driven by exact EM.
#[pyclass]
struct Gmm {
    family: GmmFamily,
    model: GaussianMixtureModel,
}

#[pymethods]
impl Gmm {
    /// Seeded k-means++ initialization from data.
    #[staticmethod]
    fn kmeans_init(data: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Gmm> {
        let data = to_data(data)?;
        let d = data[0].len();
        let mut rng = RngStream::new(seed, 0);
        let model = gmm_init_kmeans_pp(&data, k, &mut rng).map_err(err)?;
        Ok(Gmm {
            family: GmmFamily::new(k, d),
            model,
        })
    }

    /// One exact EM update; returns the new model.
    fn em_step(&self, data: Vec<Vec<f64>>, seed: u64) -> PyResult<Gmm> {
        let data = to_data(data)?;
        let mut rng = RngStream::new(seed, 0);
        let (model, _) = em_step_gmm(&self.model, &data, &mut rng).map_err(err)?;
        Ok(Gmm {
            family: self.family.clone(),
            model,
        })
    }

    fn loglik(&self, data: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(self.model.total_log_likelihood(&to_data(data)?))
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let theta = self.family.pack(&self.model);
        let mut rng = RngStream::new(seed, 0);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = self.family.sample_prior(&theta, &mut rng);
            out.push(from_vector(&self.family.sample_decoder(&theta, &z, &mut rng)));
        }
        Ok(out)
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.model.weights.clone()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.model.means.iter().map(from_vector).collect()
    }

    #[getter]
    fn variances(&self) -> Vec<f64> {
        self.model.variances.clone()
    }
}

/// Linear-Gaussian latent model with exact marginals and posteriors,
/// plus the stochastic bound machinery evaluated against them.
#[pyclass]
struct LinearGaussian {
    family: LgFamily,
    model: LinearGaussianModel,
}

impl LinearGaussian {
    fn theta(&self) -> Vector {
        self.family.pack(&self.model)
    }
}

#[pymethods]
impl LinearGaussian {
    /// `w` is the d-by-k loading matrix given as d rows.
    #[new]
    fn new(w: Vec<Vec<f64>>, mu: Vec<f64>, sigma2: f64) -> PyResult<Self> {
        let d = w.len();
        if d == 0 || w.iter().any(|r| r.len() != w[0].len()) {
            return Err(PyValueError::new_err("loading matrix rows are uneven"));
        }
        let k = w[0].len();
        let loading = Matrix::from_fn(d, k, |r, c| w[r][c]);
        let model = LinearGaussianModel::new(loading, to_vector(mu), sigma2).map_err(err)?;
        Ok(LinearGaussian {
            family: LgFamily::new(d, k),
            model,
        })
    }

    /// The fixed model behind the `linear_gaussian` dataset spec.
    #[staticmethod]
    fn dataset_truth() -> PyResult<Self> {
        match truth_for(DataSpec::LinearGaussian) {
            Truth::LinearGaussian(model) => Ok(LinearGaussian {
                family: LgFamily::new(model.data_dim(), model.latent_dim()),
                model,
            }),
            _ => Err(PyValueError::new_err("unexpected truth kind")),
        }
    }

    fn log_marginal(&self, x: Vec<f64>) -> PyResult<f64> {
        lg_log_marginal(&self.model, &to_vector(x)).map_err(err)
    }

    /// Exact posterior over the latent: (mean, covariance rows).
    fn posterior(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let post = lg_posterior(&self.model, &to_vector(x)).map_err(err)?;
        let k = post.mean().len();
        let cov = (0..k)
            .map(|r| (0..k).map(|c| post.cov()[(r, c)]).collect())
            .collect();
        Ok((from_vector(post.mean()), cov))
    }

    /// Monte Carlo bound estimate under a diagonal Gaussian with the
    /// given mean and log standard deviations.
    fn elbo(
        &self,
        alpha: Vec<f64>,
        log_beta: Vec<f64>,
        x: Vec<f64>,
        draws: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let params = MeanFieldParams::new(to_vector(alpha), to_vector(log_beta));
        let mut rng = RngStream::new(seed, 0);
        Ok(elbo_estimate(
            &self.family,
            &self.theta(),
            &params,
            &to_vector(x),
            draws,
            &mut rng,
        ))
    }

    /// Closed-form value of the same bound.
    fn elbo_exact(&self, alpha: Vec<f64>, log_beta: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        let params = MeanFieldParams::new(to_vector(alpha), to_vector(log_beta));
        Ok(elbo_analytic_lg(&self.model, &params, &to_vector(x)))
    }

    /// Stochastic refinement of the per-datum variational parameters;
    /// returns (mean, log standard deviations).
    #[pyo3(signature = (x, steps = 500, step_size = 1e-2, draws = 64, seed = 0))]
    fn fit_local(
        &self,
        x: Vec<f64>,
        steps: usize,
        step_size: f64,
        draws: usize,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let mut rng = RngStream::new(seed, 0);
        let init = MeanFieldParams::standard(self.model.latent_dim());
        let fitted = fit_local(
            &self.family,
            &self.theta(),
            &to_vector(x),
            &init,
            steps,
            step_size,
            draws,
            &mut rng,
        )
        .map_err(err)?;
        Ok((
            from_vector(&fitted.alpha),
            from_vector(&fitted.stddev().map(f64::ln)),
        ))
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let theta = self.theta();
        let mut rng = RngStream::new(seed, 0);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = self.family.sample_prior(&theta, &mut rng);
            out.push(from_vector(&self.family.sample_decoder(&theta, &z, &mut rng)));
        }
        Ok(out)
    }
}

/// Denoising model: a noise-prediction network plus a variance schedule,
/// trained by minibatch descent and sampled by the reverse chain.
#[pyclass]
struct Diffusion {
    psi: NoisePredictor,
    schedule: VarianceSchedule,
    theta: Vector,
}

#[pymethods]
impl Diffusion {
    /// Linear schedule from `phi_start` down to `phi_end` over `t_steps`
    /// (equal endpoints give a constant schedule). The network starts at
    /// a seeded random initialization.
    #[new]
    #[pyo3(signature = (dim, hidden, t_steps = 50, phi_start = 0.999, phi_end = 0.95, seed = 0))]
    fn new(
        dim: usize,
        hidden: Vec<usize>,
        t_steps: usize,
        phi_start: f64,
        phi_end: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let psi = NoisePredictor::with_hidden(dim, &hidden, Activation::Tanh).map_err(err)?;
        let schedule =
            schedule_make(ScheduleKind::Linear { phi_start, phi_end }, t_steps).map_err(err)?;
        let mut rng = RngStream::new(seed, 0);
        let theta = psi.init(&mut rng);
        Ok(Diffusion {
            psi,
            schedule,
            theta,
        })
    }

    /// Trains in place and returns the per-epoch loss trace.
    #[pyo3(signature = (data, epochs, batch_size = 64, step_size = 1e-2, draws = 1, weighted = false, polyak_tail = 0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data: Vec<Vec<f64>>,
        epochs: usize,
        batch_size: usize,
        step_size: f64,
        draws: usize,
        weighted: bool,
        polyak_tail: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data = to_data(data)?;
        let config = DdmConfig {
            epochs,
            batch_size,
            gamma: step_size,
            draws_per_datum: draws,
            weighted,
            adaptive: true,
            polyak_tail,
            moment_every: 0,
            moment_samples: 0,
        };
        let mut rng = RngStream::new(seed, 0);
        let state =
            train_ddm(&self.psi, &data, &self.schedule, &self.theta, &config, &mut rng)
                .map_err(err)?;
        self.theta = state.theta;
        Ok(state.loss_trace)
    }

    /// Unweighted noise-prediction loss on a dataset.
    #[pyo3(signature = (data, draws = 4, seed = 0))]
    fn loss(&self, data: Vec<Vec<f64>>, draws: usize, seed: u64) -> PyResult<f64> {
        let data = to_data(data)?;
        let mut rng = RngStream::new(seed, 0);
        simple_loss(
            &self.psi,
            &self.theta,
            &data,
            draws,
            &self.schedule,
            &mut rng,
            false,
        )
        .map_err(err)
    }

    /// Ancestral draws from the learned reverse chain.
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = RngStream::new(seed, 0);
        let samples =
            sample_reverse(&self.psi, &self.theta, &self.schedule, n, &mut rng).map_err(err)?;
        Ok(from_data(&samples))
    }

    #[getter]
    fn t_steps(&self) -> usize {
        self.schedule.t_max()
    }
}

/// Draws one of the fixed benchmark datasets: gmm2d, linear_gaussian,
/// two_gaussians_2d, or ar_sanity.
#[pyfunction]
fn gen_data(spec: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = DataSpec::parse(spec).map_err(err)?;
    let (data, _) = harness_gen_data(spec, n, seed).map_err(err)?;
    Ok(from_data(&data))
}

/// Audits every analytic gradient against finite differences; returns
/// (name, value, bound, pass) per gradient family.
#[pyfunction]
fn gradcheck(seed: u64, trials: usize) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = run_gradcheck(seed, trials).map_err(err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_string(), r.value, r.bound, r.pass))
        .collect())
}

/// Runs a named verification suite (numkit, diffnet, em, vi, vae, ddm,
/// or all); returns (name, value, bound, pass) per check.
#[pyfunction]
fn verify(suite: &str, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let suite = Suite::parse(suite).map_err(err)?;
    let results = run_suite(suite, seed).map_err(err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_string(), r.value, r.bound, r.pass))
        .collect())
}

#[pymodule]
fn latentfit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Gmm>()?;
    m.add_class::<LinearGaussian>()?;
    m.add_class::<Diffusion>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
