use nalgebra::Cholesky;

use super::{LatentKind, LatentModel, ModelError};
use crate::numkit::{
    log_pdf_gaussian_diag, GaussianDense, Matrix, NumError, RngStream, Vector,
};

/// Linear-Gaussian factor model: x = μ + W z + ε with ε ~ N(0, σ²I_d) and
/// prior z ~ N(0, I_k). Everything is closed form, which makes this the
/// oracle model for the variational estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    w: Matrix,
    mu: Vector,
    sigma2: f64,
}

impl LinearGaussianModel {
    pub fn new(w: Matrix, mu: Vector, sigma2: f64) -> Result<Self, ModelError> {
        if w.nrows() != mu.len() {
            return Err(ModelError::Params(format!(
                "loading is {}x{} but offset has {} entries",
                w.nrows(),
                w.ncols(),
                mu.len()
            )));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(ModelError::Params("noise variance must be positive".into()));
        }
        Ok(LinearGaussianModel { w, mu, sigma2 })
    }

    pub fn loading(&self) -> &Matrix {
        &self.w
    }

    pub fn offset(&self) -> &Vector {
        &self.mu
    }

    pub fn noise_var(&self) -> f64 {
        self.sigma2
    }

    pub fn data_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Marginal covariance WWᵀ + σ²I of the observed variable.
    pub fn marginal_cov(&self) -> Matrix {
        &self.w * self.w.transpose() + Matrix::identity(self.data_dim(), self.data_dim()) * self.sigma2
    }
}

/// Exact posterior p_θ(z|x) = N(Wᵀ S⁻¹ (x−μ), I − Wᵀ S⁻¹ W), S = WWᵀ + σ²I.
pub fn lg_posterior(model: &LinearGaussianModel, x: &Vector) -> Result<GaussianDense, ModelError> {
    if x.len() != model.data_dim() {
        return Err(ModelError::Num(NumError::Dim(format!(
            "x has {} entries, model expects {}",
            x.len(),
            model.data_dim()
        ))));
    }
    let s = model.marginal_cov();
    let chol = Cholesky::new(s).ok_or(NumError::NotPositiveDefinite)?;
    let wt = model.w.transpose();
    let mean = &wt * chol.solve(&(x - &model.mu));
    let k = model.latent_dim();
    let cov = Matrix::identity(k, k) - &wt * chol.solve(&model.w);
    Ok(GaussianDense::new(mean, cov)?)
}

/// Exact observed log-likelihood ℓ(θ|x) = log N(x; μ, WWᵀ + σ²I).
pub fn lg_log_marginal(model: &LinearGaussianModel, x: &Vector) -> Result<f64, ModelError> {
    let marginal = GaussianDense::new(model.mu.clone(), model.marginal_cov())?;
    Ok(marginal.log_pdf(x)?)
}

/// The linear-Gaussian family seen through a flat θ = [vec(W) row-major, μ,
/// log σ²]. Storing log σ² keeps gradient-based θ updates unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LgFamily {
    pub d: usize,
    pub k: usize,
}

impl LgFamily {
    pub fn new(d: usize, k: usize) -> Self {
        assert!(d >= 1 && k >= 1);
        LgFamily { d, k }
    }

    pub fn pack(&self, model: &LinearGaussianModel) -> Vector {
        assert_eq!(model.data_dim(), self.d);
        assert_eq!(model.latent_dim(), self.k);
        let mut theta = Vector::zeros(self.param_len());
        let mut off = 0;
        for r in 0..self.d {
            for c in 0..self.k {
                theta[off] = model.w[(r, c)];
                off += 1;
            }
        }
        for r in 0..self.d {
            theta[off] = model.mu[r];
            off += 1;
        }
        theta[off] = model.sigma2.ln();
        theta
    }

    pub fn unpack(&self, theta: &Vector) -> Result<LinearGaussianModel, ModelError> {
        if theta.len() != self.param_len() {
            return Err(ModelError::Params(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                theta.len()
            )));
        }
        let w = Matrix::from_fn(self.d, self.k, |r, c| theta[r * self.k + c]);
        let mu = Vector::from_fn(self.d, |r, _| theta[self.d * self.k + r]);
        let sigma2 = theta[self.d * self.k + self.d].exp();
        LinearGaussianModel::new(w, mu, sigma2)
    }

    fn residual(&self, model: &LinearGaussianModel, x: &Vector, z: &Vector) -> Vector {
        x - &model.mu - &model.w * z
    }
}

impl LatentModel for LgFamily {
    fn name(&self) -> &'static str {
        "linear_gaussian"
    }

    fn data_dim(&self) -> usize {
        self.d
    }

    fn latent_kind(&self) -> LatentKind {
        LatentKind::Continuous { k: self.k }
    }

    fn param_len(&self) -> usize {
        self.d * self.k + self.d + 1
    }

    fn complete_loglik(&self, theta: &Vector, x: &Vector, z: &Vector) -> f64 {
        let model = self.unpack(theta).expect("invalid parameters");
        assert_eq!(x.len(), self.d, "data dimension mismatch");
        assert_eq!(z.len(), self.k, "latent dimension mismatch");
        let mean = &model.mu + &model.w * z;
        let var = Vector::from_element(self.d, model.sigma2);
        let likelihood = log_pdf_gaussian_diag(x, &mean, &var).expect("positive variance");
        let prior = log_pdf_gaussian_diag(
            z,
            &Vector::zeros(self.k),
            &Vector::from_element(self.k, 1.0),
        )
        .unwrap();
        likelihood + prior
    }

    fn score_theta(&self, theta: &Vector, x: &Vector, z: &Vector) -> Result<Vector, ModelError> {
        let model = self.unpack(theta)?;
        let resid = self.residual(&model, x, z);
        let mut grad = Vector::zeros(self.param_len());
        let inv_var = 1.0 / model.sigma2;
        for r in 0..self.d {
            for c in 0..self.k {
                grad[r * self.k + c] = resid[r] * inv_var * z[c];
            }
        }
        for r in 0..self.d {
            grad[self.d * self.k + r] = resid[r] * inv_var;
        }
        // d/d(log σ²) = −d/2 + ‖resid‖² / (2σ²).
        grad[self.d * self.k + self.d] =
            -0.5 * self.d as f64 + 0.5 * resid.norm_squared() * inv_var;
        Ok(grad)
    }

    fn grad_z(&self, theta: &Vector, x: &Vector, z: &Vector) -> Result<Vector, ModelError> {
        let model = self.unpack(theta)?;
        let resid = self.residual(&model, x, z);
        Ok(model.w.transpose() * resid / model.sigma2 - z)
    }

    fn sample_prior(&self, _theta: &Vector, rng: &mut RngStream) -> Vector {
        rng.sample_std_normal(self.k)
    }

    fn sample_decoder(&self, theta: &Vector, z: &Vector, rng: &mut RngStream) -> Vector {
        let model = self.unpack(theta).expect("invalid parameters");
        &model.mu + &model.w * z + rng.sample_std_normal(self.d) * model.sigma2.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::super::quadrature_log_marginal;
    use super::*;
    use crate::numkit::{finite_diff_grad, gaussian_condition, rel_error, QuadGrid};

    fn vec(entries: &[f64]) -> Vector {
        Vector::from_column_slice(entries)
    }

    fn example_model() -> LinearGaussianModel {
        LinearGaussianModel::new(
            Matrix::from_row_slice(3, 2, &[0.8, -0.3, 0.2, 0.9, -0.5, 0.4]),
            vec(&[0.5, -1.0, 0.25]),
            0.49,
        )
        .unwrap()
    }

    #[test]
    fn zero_loading_posterior_is_prior() {
        let m = LinearGaussianModel::new(Matrix::zeros(2, 2), vec(&[1.0, 2.0]), 0.5).unwrap();
        let post = lg_posterior(&m, &vec(&[3.0, -1.0])).unwrap();
        assert!(post.mean().norm() < 1e-14);
        assert!((post.cov() - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn scalar_posterior_hand_computed() {
        // d=k=1, W=1, μ=0, σ²=1, x=2: posterior N(1, 0.5).
        let m = LinearGaussianModel::new(Matrix::from_element(1, 1, 1.0), vec(&[0.0]), 1.0).unwrap();
        let post = lg_posterior(&m, &vec(&[2.0])).unwrap();
        assert!((post.mean()[0] - 1.0).abs() < 1e-12);
        assert!((post.cov()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_agrees_with_gaussian_conditioning() {
        // Joint of (z, x): mean (0, μ), cov [[I, Wᵀ], [W, WWᵀ+σ²I]].
        let m = example_model();
        let (d, k) = (m.data_dim(), m.latent_dim());
        let mut mean = Vector::zeros(k + d);
        for r in 0..d {
            mean[k + r] = m.offset()[r];
        }
        let mut cov = Matrix::zeros(k + d, k + d);
        for i in 0..k {
            cov[(i, i)] = 1.0;
        }
        for r in 0..d {
            for c in 0..k {
                cov[(k + r, c)] = m.loading()[(r, c)];
                cov[(c, k + r)] = m.loading()[(r, c)];
            }
        }
        let s = m.marginal_cov();
        for r in 0..d {
            for c in 0..d {
                cov[(k + r, k + c)] = s[(r, c)];
            }
        }
        let x = vec(&[1.2, -0.4, 0.6]);
        let obs_idx: Vec<usize> = (k..k + d).collect();
        let cond = gaussian_condition(&mean, &cov, &obs_idx, x.as_slice()).unwrap();
        let post = lg_posterior(&m, &x).unwrap();
        assert!((cond.mean() - post.mean()).norm() < 1e-10);
        assert!((cond.cov() - post.cov()).norm() < 1e-10);
    }

    #[test]
    fn marginal_standard_normal_case() {
        let m = LinearGaussianModel::new(Matrix::zeros(1, 1), vec(&[0.0]), 1.0).unwrap();
        let l = lg_log_marginal(&m, &vec(&[0.0])).unwrap();
        assert!((l - (-0.9189385332046727)).abs() < 1e-10);
    }

    #[test]
    fn marginal_variance_addition() {
        // W=1, σ²=1: x ~ N(0, 2).
        let m = LinearGaussianModel::new(Matrix::from_element(1, 1, 1.0), vec(&[0.0]), 1.0).unwrap();
        for &x in &[-1.5, 0.0, 0.7, 2.2] {
            let l = lg_log_marginal(&m, &vec(&[x])).unwrap();
            let expected =
                log_pdf_gaussian_diag(&vec(&[x]), &vec(&[0.0]), &vec(&[2.0])).unwrap();
            assert!((l - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_matches_quadrature() {
        let family = LgFamily::new(2, 1);
        let m = LinearGaussianModel::new(
            Matrix::from_row_slice(2, 1, &[0.9, -0.6]),
            vec(&[0.3, -0.2]),
            0.7,
        )
        .unwrap();
        let theta = family.pack(&m);
        let grid = QuadGrid::standard(1).unwrap();
        for &xv in &[[0.0, 0.0], [1.0, -0.5], [-2.0, 1.5]] {
            let x = vec(&xv);
            let quad = quadrature_log_marginal(&family, &theta, &x, &grid).unwrap();
            let exact = lg_log_marginal(&m, &x).unwrap();
            assert!((quad - exact).abs() < 1e-6, "{quad} vs {exact}");
        }
    }

    #[test]
    fn loglik_identity_for_any_z() {
        // ℓ(θ|x) = ℓ(θ|x,z) − log p_θ(z|x) must hold for every z.
        let family = LgFamily::new(3, 2);
        let m = example_model();
        let theta = family.pack(&m);
        let x = vec(&[0.9, -0.7, 0.1]);
        let marginal = lg_log_marginal(&m, &x).unwrap();
        let post = lg_posterior(&m, &x).unwrap();
        let mut rng = RngStream::new(12, 0);
        for _ in 0..100 {
            let z = rng.sample_std_normal(2) * 2.0;
            let complete = family.complete_loglik(&theta, &x, &z);
            let log_post = post.log_pdf(&z).unwrap();
            assert!((marginal - (complete - log_post)).abs() < 1e-8);
        }
    }

    #[test]
    fn pack_round_trips() {
        let family = LgFamily::new(3, 2);
        let m = example_model();
        let theta = family.pack(&m);
        let back = family.unpack(&theta).unwrap();
        assert!((back.loading() - m.loading()).norm() < 1e-12);
        assert!((back.offset() - m.offset()).norm() < 1e-12);
        assert!((back.noise_var() - m.noise_var()).abs() < 1e-12);
    }

    #[test]
    fn score_and_grad_z_match_finite_differences() {
        let family = LgFamily::new(3, 2);
        let mut rng = RngStream::new(31, 0);
        for _ in 0..20 {
            let theta = rng.sample_std_normal(family.param_len());
            let x = rng.sample_std_normal(3);
            let z = rng.sample_std_normal(2);
            let score = family.score_theta(&theta, &x, &z).unwrap();
            let fd_theta =
                finite_diff_grad(|t| family.complete_loglik(t, &x, &z), &theta, 1e-5);
            assert!(rel_error(&score, &fd_theta) < 1e-6);
            let gz = family.grad_z(&theta, &x, &z).unwrap();
            let fd_z = finite_diff_grad(|zz| family.complete_loglik(&theta, &x, zz), &z, 1e-5);
            assert!(rel_error(&gz, &fd_z) < 1e-6);
        }
    }

    #[test]
    fn decoder_round_trip_mean() {
        let family = LgFamily::new(3, 2);
        let m = example_model();
        let theta = family.pack(&m);
        let mut rng = RngStream::new(77, 0);
        let n = 100_000;
        let mut sum = Vector::zeros(3);
        for _ in 0..n {
            let z = family.sample_prior(&theta, &mut rng);
            sum += family.sample_decoder(&theta, &z, &mut rng);
        }
        let mean = sum / n as f64;
        let s = m.marginal_cov();
        for r in 0..3 {
            let se = (s[(r, r)] / n as f64).sqrt();
            assert!(
                (mean[r] - m.offset()[r]).abs() < 3.0 * se,
                "coord {r}: {} vs {}",
                mean[r],
                m.offset()[r]
            );
        }
    }
}
