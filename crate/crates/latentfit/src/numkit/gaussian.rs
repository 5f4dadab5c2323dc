use nalgebra::Cholesky;

use super::{Matrix, NumError, RngStream, Vector};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian N(mean, diag(stddev²)).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mean: Vector,
    stddev: Vector,
}

impl GaussianDiag {
    pub fn new(mean: Vector, stddev: Vector) -> Result<Self, NumError> {
        if mean.len() != stddev.len() {
            return Err(NumError::Dim(format!(
                "mean has {} entries, stddev has {}",
                mean.len(),
                stddev.len()
            )));
        }
        if stddev.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(NumError::Domain("stddev entries must be positive".into()));
        }
        Ok(GaussianDiag { mean, stddev })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn stddev(&self) -> &Vector {
        &self.stddev
    }

    pub fn log_pdf(&self, x: &Vector) -> f64 {
        let var = self.stddev.map(|s| s * s);
        log_pdf_gaussian_diag(x, &self.mean, &var).expect("stddev validated at construction")
    }

    pub fn entropy(&self) -> f64 {
        entropy_gaussian_diag(&self.stddev).expect("stddev validated at construction")
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vector {
        let eps = rng.sample_std_normal(self.dim());
        &self.mean + self.stddev.component_mul(&eps)
    }
}

/// Full-covariance Gaussian N(mean, cov). The zero-dimensional case is legal
/// and stands for "nothing left to condition on".
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDense {
    mean: Vector,
    cov: Matrix,
}

impl GaussianDense {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self, NumError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(NumError::Dim(format!(
                "mean has {} entries, cov is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianDense { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>, NumError> {
        Cholesky::new(self.cov.clone()).ok_or(NumError::NotPositiveDefinite)
    }

    pub fn log_pdf(&self, x: &Vector) -> Result<f64, NumError> {
        if x.len() != self.dim() {
            return Err(NumError::Dim(format!(
                "x has {} entries, distribution is {}-dimensional",
                x.len(),
                self.dim()
            )));
        }
        let chol = self.cholesky()?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let r = x - &self.mean;
        let quad = r.dot(&chol.solve(&r));
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + log_det + quad))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Vector, NumError> {
        let chol = self.cholesky()?;
        let eps = rng.sample_std_normal(self.dim());
        Ok(&self.mean + chol.l() * eps)
    }
}

/// log N(x; mean, diag(var)) = −½ Σ_j [log(2π var_j) + (x_j − mean_j)²/var_j].
pub fn log_pdf_gaussian_diag(x: &Vector, mean: &Vector, var: &Vector) -> Result<f64, NumError> {
    if x.len() != mean.len() || x.len() != var.len() {
        return Err(NumError::Dim(format!(
            "x/mean/var lengths {}/{}/{}",
            x.len(),
            mean.len(),
            var.len()
        )));
    }
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(NumError::Domain("variance entries must be positive".into()));
    }
    let mut acc = 0.0;
    for j in 0..x.len() {
        let d = x[j] - mean[j];
        acc += (LN_2PI + var[j].ln()) + d * d / var[j];
    }
    Ok(-0.5 * acc)
}

/// Entropy of N(·, diag(stddev²)): (k/2) log(2πe) + Σ_j log stddev_j.
pub fn entropy_gaussian_diag(stddev: &Vector) -> Result<f64, NumError> {
    if stddev.iter().any(|s| !(*s > 0.0)) {
        return Err(NumError::Domain("stddev entries must be positive".into()));
    }
    let k = stddev.len() as f64;
    Ok(0.5 * k * (LN_2PI + 1.0) + stddev.iter().map(|s| s.ln()).sum::<f64>())
}

/// KL(N(m0, S0) ‖ N(m1, S1)) for dense covariances.
pub fn kl_gaussian_dense(
    m0: &Vector,
    s0: &Matrix,
    m1: &Vector,
    s1: &Matrix,
) -> Result<f64, NumError> {
    let k = m0.len();
    if m1.len() != k || s0.nrows() != k || s0.ncols() != k || s1.nrows() != k || s1.ncols() != k {
        return Err(NumError::Dim("kl_gaussian_dense shape mismatch".into()));
    }
    let chol1 = Cholesky::new(s1.clone()).ok_or(NumError::NotPositiveDefinite)?;
    let chol0 = Cholesky::new(s0.clone()).ok_or(NumError::NotPositiveDefinite)?;
    let log_det1: f64 = chol1.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let log_det0: f64 = chol0.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let trace = chol1.solve(s0).trace();
    let dm = m1 - m0;
    let quad = dm.dot(&chol1.solve(&dm));
    Ok(0.5 * (trace + quad - k as f64 + log_det1 - log_det0))
}

/// Conditions N(mean, cov) on `observed_idx[j] = observed_vals[j]` and returns
/// the exact conditional of the remaining coordinates via the Schur
/// complement. Observing every coordinate yields the empty distribution.
pub fn gaussian_condition(
    mean: &Vector,
    cov: &Matrix,
    observed_idx: &[usize],
    observed_vals: &[f64],
) -> Result<GaussianDense, NumError> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(NumError::Dim(format!(
            "mean has {n} entries, cov is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if observed_idx.len() != observed_vals.len() {
        return Err(NumError::Dim(
            "observed_idx and observed_vals differ in length".into(),
        ));
    }
    let mut seen = vec![false; n];
    for &i in observed_idx {
        if i >= n {
            return Err(NumError::Domain(format!("observed index {i} out of range")));
        }
        if seen[i] {
            return Err(NumError::Domain(format!("observed index {i} repeated")));
        }
        seen[i] = true;
    }
    // The contract demands a PD joint covariance, not merely a PD observed
    // block; a non-PD joint would yield a "conditional" with negative variance.
    if Cholesky::new(cov.clone()).is_none() {
        return Err(NumError::NotPositiveDefinite);
    }
    let free: Vec<usize> = (0..n).filter(|i| !seen[*i]).collect();
    if free.is_empty() {
        return GaussianDense::new(Vector::zeros(0), Matrix::zeros(0, 0));
    }
    if observed_idx.is_empty() {
        return GaussianDense::new(mean.clone(), cov.clone());
    }

    let m = observed_idx.len();
    let u = free.len();
    let mu_o = Vector::from_fn(m, |j, _| mean[observed_idx[j]]);
    let mu_u = Vector::from_fn(u, |j, _| mean[free[j]]);
    let cov_oo = Matrix::from_fn(m, m, |r, c| cov[(observed_idx[r], observed_idx[c])]);
    let cov_uo = Matrix::from_fn(u, m, |r, c| cov[(free[r], observed_idx[c])]);
    let cov_uu = Matrix::from_fn(u, u, |r, c| cov[(free[r], free[c])]);

    let chol = Cholesky::new(cov_oo).ok_or(NumError::NotPositiveDefinite)?;
    let resid = Vector::from_column_slice(observed_vals) - mu_o;
    let cond_mean = mu_u + &cov_uo * chol.solve(&resid);
    let cond_cov = cov_uu - &cov_uo * chol.solve(&cov_uo.transpose());
    GaussianDense::new(cond_mean, cond_cov)
}
