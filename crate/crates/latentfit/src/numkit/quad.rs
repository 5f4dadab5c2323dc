use super::stats::logsumexp;
use super::{NumError, Vector};

/// Tensor-product quadrature grid over a bounded box, the brute-force oracle
/// for `log ∫ p(x, z) dz` in latent dimension k ≤ 2.
///
/// Nodes and weights are Gauss–Legendre on each axis, rescaled to the box.
/// The box must cover the integrand's mass; the default spans eight prior
/// standard deviations, which leaves truncation error far below the grid's
/// declared 1e-6 tolerance for Gaussian-tailed integrands.
#[derive(Clone, Debug)]
pub struct QuadGrid {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    lo: f64,
    hi: f64,
}

pub const DEFAULT_NODES: usize = 201;
pub const DEFAULT_HALF_WIDTH: f64 = 8.0;

impl QuadGrid {
    pub fn new(dim: usize, nodes_per_dim: usize, lo: f64, hi: f64) -> Result<Self, NumError> {
        if dim == 0 || dim > 2 {
            return Err(NumError::Unsupported(format!(
                "quadrature supports latent dimension 1 or 2, got {dim}"
            )));
        }
        if nodes_per_dim < 2 {
            return Err(NumError::Domain("need at least 2 nodes per dimension".into()));
        }
        if !(lo < hi) {
            return Err(NumError::Domain(format!("invalid bounds [{lo}, {hi}]")));
        }
        let (mut nodes, mut weights) = gauss_legendre(nodes_per_dim);
        let center = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        for i in 0..nodes_per_dim {
            nodes[i] = center + half * nodes[i];
            weights[i] *= half;
        }
        Ok(QuadGrid {
            dim,
            nodes,
            weights,
            lo,
            hi,
        })
    }

    /// Default oracle grid for a standard-normal prior: 201 nodes per axis on
    /// [−8, 8].
    pub fn standard(dim: usize) -> Result<Self, NumError> {
        QuadGrid::new(dim, DEFAULT_NODES, -DEFAULT_HALF_WIDTH, DEFAULT_HALF_WIDTH)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Visits every tensor-product node with its scalar weight.
    pub fn for_each_node(&self, mut visit: impl FnMut(&Vector, f64)) {
        match self.dim {
            1 => {
                let mut z = Vector::zeros(1);
                for (i, &x) in self.nodes.iter().enumerate() {
                    z[0] = x;
                    visit(&z, self.weights[i]);
                }
            }
            2 => {
                let mut z = Vector::zeros(2);
                for (i, &x) in self.nodes.iter().enumerate() {
                    z[0] = x;
                    for (j, &y) in self.nodes.iter().enumerate() {
                        z[1] = y;
                        visit(&z, self.weights[i] * self.weights[j]);
                    }
                }
            }
            _ => unreachable!("dimension validated at construction"),
        }
    }
}

/// log ∫ exp(log_f(z)) dz over the grid's box, accumulated as a log-sum-exp
/// of log_f(z) + log w so that strongly negative integrands cannot underflow.
pub fn log_integral(grid: &QuadGrid, mut log_f: impl FnMut(&Vector) -> f64) -> f64 {
    let mut terms =
        Vec::with_capacity(grid.nodes_per_dim().pow(grid.dim() as u32));
    grid.for_each_node(|z, w| terms.push(log_f(z) + w.ln()));
    logsumexp(&terms)
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration on the
/// Legendre recurrence. Standard construction; nodes are symmetric and the
/// weights sum to 2.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P'_n via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::super::{log_pdf_gaussian_diag, RngStream};
    use super::*;

    #[test]
    fn weights_sum_to_interval_volume() {
        for &n in &[2, 5, 64, 201] {
            let grid = QuadGrid::new(1, n, -8.0, 8.0).unwrap();
            let mut total = 0.0;
            grid.for_each_node(|_, w| total += w);
            assert!((total - 16.0).abs() < 1e-10, "n={n}: {total}");
        }
        let grid = QuadGrid::new(2, 31, -2.0, 3.0).unwrap();
        let mut total = 0.0;
        grid.for_each_node(|_, w| total += w);
        assert!((total - 25.0).abs() < 1e-10);
    }

    #[test]
    fn polynomial_exactness() {
        // An n-point rule integrates degree 2n−1 exactly: ∫_{-1}^{1} x⁴ = 2/5.
        let grid = QuadGrid::new(1, 3, -1.0, 1.0).unwrap();
        let mut acc = 0.0;
        grid.for_each_node(|z, w| acc += w * z[0].powi(4));
        assert!((acc - 0.4).abs() < 1e-14);
    }

    #[test]
    fn standard_normal_normalizes() {
        let grid = QuadGrid::standard(1).unwrap();
        let mean = Vector::zeros(1);
        let var = Vector::from_element(1, 1.0);
        let logz = log_integral(&grid, |z| {
            log_pdf_gaussian_diag(z, &mean, &var).unwrap()
        });
        assert!(logz.abs() < 1e-8, "log ∫ N(0,1) = {logz}");
    }

    #[test]
    fn bivariate_normal_normalizes() {
        let grid = QuadGrid::standard(2).unwrap();
        let mean = Vector::from_column_slice(&[0.4, -0.2]);
        let var = Vector::from_column_slice(&[1.3, 0.6]);
        let logz = log_integral(&grid, |z| {
            log_pdf_gaussian_diag(z, &mean, &var).unwrap()
        });
        assert!(logz.abs() < 1e-8, "log ∫ = {logz}");
    }

    #[test]
    fn refinement_is_stable() {
        // A non-Gaussian but smooth integrand: doubling the node count moves
        // the result by less than the grid's declared tolerance.
        let f = |z: &Vector| -0.5 * z[0] * z[0] - 0.1 * (z[0] * 1.3).sin().powi(2);
        let coarse = log_integral(&QuadGrid::new(1, 201, -8.0, 8.0).unwrap(), f);
        let fine = log_integral(&QuadGrid::new(1, 402, -8.0, 8.0).unwrap(), f);
        assert!((coarse - fine).abs() < 1e-6, "{coarse} vs {fine}");
    }

    #[test]
    fn rejects_unsupported_dimension() {
        assert!(QuadGrid::new(3, 10, -8.0, 8.0).is_err());
        assert!(QuadGrid::new(0, 10, -8.0, 8.0).is_err());
    }

    #[test]
    fn underflow_resistant() {
        // Shifting the integrand by a huge negative constant shifts the
        // log-integral by exactly that constant.
        let grid = QuadGrid::standard(1).unwrap();
        let mean = Vector::zeros(1);
        let var = Vector::from_element(1, 1.0);
        let base = log_integral(&grid, |z| log_pdf_gaussian_diag(z, &mean, &var).unwrap());
        let shifted = log_integral(&grid, |z| {
            log_pdf_gaussian_diag(z, &mean, &var).unwrap() - 5000.0
        });
        assert!((shifted - (base - 5000.0)).abs() < 1e-9);
    }

    #[test]
    fn matches_monte_carlo_on_smooth_integrand() {
        // ∫ N(z; 0, 1) cosh(z) dz = e^{1/2}; quadrature should nail it and a
        // big Monte Carlo run should agree loosely.
        let grid = QuadGrid::standard(1).unwrap();
        let mean = Vector::zeros(1);
        let var = Vector::from_element(1, 1.0);
        let logv = log_integral(&grid, |z| {
            log_pdf_gaussian_diag(z, &mean, &var).unwrap() + z[0].cosh().ln()
        });
        assert!((logv.exp() - 0.5f64.exp()).abs() < 1e-9, "{}", logv.exp());
        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let mc: f64 = (0..n).map(|_| rng.standard_normal().cosh()).sum::<f64>() / n as f64;
        assert!((mc - 0.5f64.exp()).abs() < 0.05);
    }
}
