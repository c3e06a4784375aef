//! Statistical test machinery: Kolmogorov-Smirnov tests against an analytic
//! CDF or between two samples, total-variation distance, and thin wrappers
//! around the standard normal distribution.

use statrs::distribution::{ContinuousCDF, Normal};

/// Result of a KS test.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    /// Supremum distance between the two distribution functions.
    pub statistic: f64,
    /// Effective sample size entering the asymptotic distribution.
    pub effective_n: f64,
    /// Two-sided asymptotic p-value.
    pub p_value: f64,
}

impl KsResult {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// Two-sided one-sample KS test of `sample` against the CDF `cdf`.
pub fn ks_test_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    assert!(!sample.is_empty(), "KS test needs a non-empty sample");
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    KsResult {
        statistic: d,
        effective_n: n,
        p_value: ks_p_value(d, n),
    }
}

/// Two-sided two-sample KS test.
pub fn ks_test_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "KS test needs non-empty samples"
    );
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|u, v| u.total_cmp(v));
    xb.sort_by(|u, v| u.total_cmp(v));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let effective_n = na * nb / (na + nb);
    KsResult {
        statistic: d,
        effective_n,
        p_value: ks_p_value(d, effective_n),
    }
}

/// Asymptotic two-sided p-value of the KS statistic, using Stephens'
/// finite-sample correction and the Kolmogorov series
/// `Q(lambda) = 2 * sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2)`.
pub fn ks_p_value(d: f64, effective_n: f64) -> f64 {
    let sqrt_n = effective_n.sqrt();
    let lambda = d * (sqrt_n + 0.12 + 0.11 / sqrt_n);
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Critical KS statistic at the given two-sided significance level,
/// `c(alpha) / sqrt(n)` with `c(alpha) = sqrt(-ln(alpha/2) / 2)`.
pub fn ks_critical_value(significance: f64, effective_n: f64) -> f64 {
    (-(significance / 2.0).ln() / 2.0).sqrt() / effective_n.sqrt()
}

/// Total-variation distance between empirical counts and a reference
/// distribution: `0.5 * sum_k |count_k / n - p_k|`.
pub fn tv_distance(counts: &[u64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let n: u64 = counts.iter().sum();
    assert!(n > 0, "TV distance needs at least one observation");
    counts
        .iter()
        .zip(probs.iter())
        .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal parameters are valid")
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(
        p > 0.0 && p < 1.0,
        "normal quantile defined on the open interval, got {p}"
    );
    standard_normal().inverse_cdf(p)
}
