use super::Vector;

/// Central-difference gradient: g_j = (f(x + h e_j) − f(x − h e_j)) / (2h).
///
/// The workhorse behind every analytic-gradient check in the crate. Callers
/// that validate Monte Carlo gradients must make `f` replay common random
/// numbers (clone the stream inside the closure), otherwise sampling noise
/// swamps the h² truncation error.
pub fn finite_diff_grad(mut f: impl FnMut(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    assert!(h > 0.0, "finite_diff_grad requires a positive step");
    let mut point = x.clone();
    Vector::from_fn(x.len(), |j, _| {
        let orig = point[j];
        point[j] = orig + h;
        let fp = f(&point);
        point[j] = orig - h;
        let fm = f(&point);
        point[j] = orig;
        (fp - fm) / (2.0 * h)
    })
}

/// Relative L2 distance used by the gradient-check suites.
pub fn rel_error(a: &Vector, b: &Vector) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error length mismatch");
    let denom = a.norm().max(b.norm()).max(1e-6);
    (a - b).norm() / denom
}
