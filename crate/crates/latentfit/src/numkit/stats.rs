//! Small statistical helpers shared by estimators, verification suites, and
//! tests: log-sum-exp, sample moments, and standard errors.

/// log Σ exp(v_i), stable under large negative inputs. Empty input yields −∞.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn se_mean(values: &[f64]) -> f64 {
    (variance(values) / values.len() as f64).sqrt()
}

/// KL(p ‖ q) for probability vectors; terms with p_j = 0 contribute zero.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_categorical length mismatch");
    p.iter()
        .zip(q)
        .filter(|(pj, _)| **pj > 0.0)
        .map(|(pj, qj)| pj * (pj.ln() - qj.ln()))
        .sum()
}

/// Entropy −Σ p_j log p_j of a probability vector.
pub fn entropy_categorical(p: &[f64]) -> f64 {
    -p.iter().filter(|pj| **pj > 0.0).map(|pj| pj * pj.ln()).sum::<f64>()
}

/// Least-squares slope of y against x.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "slope length mismatch");
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
