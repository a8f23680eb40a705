//! Small numeric helpers shared across modules: log-space arithmetic, special
//! functions, the truncated Poisson, and weighted percentiles.

use statrs::function::gamma::ln_gamma;

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// `log Σ exp(x_i)`, returning `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights into probabilities. Returns `None` when every
/// entry is `-inf` (or the slice is empty).
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = log_w.iter().map(|&x| (x - lse).exp()).collect();
    // one renormalization pass absorbs the rounding of exp
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Some(w)
}

/// Log pmf of a Poisson(`rate`) truncated to the integer set `support`.
///
/// Returns `-inf` if `k` is not in the support or the support is empty.
pub fn ln_trunc_poisson(k: usize, rate: f64, support: &[usize]) -> f64 {
    if !support.contains(&k) {
        return f64::NEG_INFINITY;
    }
    let terms: Vec<f64> = support.iter().map(|&j| ln_poisson_kernel(j, rate)).collect();
    ln_poisson_kernel(k, rate) - log_sum_exp(&terms)
}

/// Log pmf of a Poisson(`rate`) truncated to `{0, 1, .., max}`.
pub fn ln_trunc_poisson_upto(k: usize, rate: f64, max: usize) -> f64 {
    if k > max {
        return f64::NEG_INFINITY;
    }
    let support: Vec<usize> = (0..=max).collect();
    ln_trunc_poisson(k, rate, &support)
}

// `k ln λ - ln k!`; the shared `-λ` cancels under truncation.
fn ln_poisson_kernel(k: usize, rate: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * rate.ln() - ln_factorial(k)
    }
}

/// Log density of `N(mean, variance)` at `x`.
pub fn ln_normal(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * d * d / variance
}

/// Inverse-CDF percentile of a weighted sample. `q` in `[0, 1]`.
///
/// Weights need not be normalized. The returned value is the smallest sample
/// whose cumulative weight reaches `q` of the total.
pub fn weighted_percentile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    assert_eq!(values.len(), weights.len());
    assert!(!values.is_empty(), "weighted_percentile of an empty sample");
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let target = q * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= target - 1e-12 * total {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
