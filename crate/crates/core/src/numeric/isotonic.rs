//! Isotonic (nondecreasing) least-squares projection via pool-adjacent-violators.

pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight)
    let mut means: Vec<f64> = Vec::with_capacity(values.len());
    let mut weights: Vec<usize> = Vec::with_capacity(values.len());
    for &v in values {
        means.push(v);
        weights.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let w1 = weights.pop().unwrap();
            let m1 = means.pop().unwrap();
            let w0 = *weights.last().unwrap();
            let m0 = *means.last().unwrap();
            let w = w0 + w1;
            *means.last_mut().unwrap() = (m0 * w0 as f64 + m1 * w1 as f64) / w as f64;
            *weights.last_mut().unwrap() = w;
        }
    }
    means
        .iter()
        .zip(&weights)
        .flat_map(|(&m, &w)| std::iter::repeat_n(m, w))
        .collect()
}

/// Projects a sampled CDF onto nondecreasing functions with values in [0, 1].
pub fn project_cdf(values: &[f64]) -> Vec<f64> {
    isotonic_increasing(values)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}
