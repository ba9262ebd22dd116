//! Numerically stable scalar primitives shared across the crate.
//!
//! All policy and loss computations run in log space; the helpers here are
//! the usual max-shifted `logsumexp`, a sigmoid that never exponentiates a
//! large positive argument, and the softplus written as
//! `max(x, 0) + ln(1 + exp(-|x|))`.

/// Log of the sum of exponentials, stabilized by shifting out the maximum.
///
/// Returns negative infinity for an empty slice (the empty sum).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (or empty): the sum is zero.  A +inf or NaN input
        // propagates, which is what callers want for fail-fast behavior.
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a logit slice, written into a fresh vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// Log-softmax of a logit slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Logistic sigmoid, stable for arguments of either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus `ln(1 + exp(x))`, stable for arguments of either sign.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unbiased sample variance (denominator `n - 1`); zero for fewer than two
/// samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_matches_naive_on_small_inputs() {
        let xs = [0.1f64, -0.7, 2.3];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(logsumexp(&xs), naive, max_relative = 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        assert_relative_eq!(logsumexp(&[1000.0, 1000.0]), 1000.0 + 2.0f64.ln());
        assert_relative_eq!(logsumexp(&[-1000.0, -1000.0]), -1000.0 + 2.0f64.ln());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[3.0, -1.0, 0.5, 700.0]);
        assert!(p.iter().all(|&x| x.is_finite() && x >= 0.0));
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_relative_eq!(sigmoid(3.0) + sigmoid(-3.0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn softplus_limits() {
        assert_relative_eq!(softplus(0.0), 2.0f64.ln());
        assert_relative_eq!(softplus(50.0), 50.0, epsilon = 1e-12);
        assert!(softplus(-50.0) > 0.0 && softplus(-50.0) < 1e-20);
    }

    #[test]
    fn variance_of_two_points() {
        assert_relative_eq!(sample_variance(&[1.0, 3.0]), 2.0);
        assert_eq!(sample_variance(&[5.0]), 0.0);
    }
}
