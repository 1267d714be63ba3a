//! Small statistical helpers: confidence intervals, goodness-of-fit tests
//! against the standard normal, and least-squares line fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided 99% standard normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Wilson score interval for `successes / trials` at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Kolmogorov-Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the KS statistic `d` for sample size `n`, with
/// Stephens' small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    // Kolmogorov survival function 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Anderson-Darling statistic `A^2` of `xs` against `cdf`.
pub fn anderson_darling(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let nf = n as f64;
    let clamp = |p: f64| p.clamp(1e-300, 1.0 - 1e-16);
    let s: f64 = (0..n)
        .map(|i| {
            let a = clamp(cdf(v[i])).ln();
            let b = (1.0 - clamp(cdf(v[n - 1 - i]))).ln();
            (2 * i + 1) as f64 * (a + b)
        })
        .sum();
    -nf - s / nf
}

/// Critical value of `A^2` at the 1% level for a fully specified null.
pub const AD_CRITICAL_1PCT: f64 = 3.857;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares `y = intercept + slope x`. Needs at least 3 points
/// and nonconstant `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    weighted_linear_fit(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares with weights `w` (inverse variances). The slope
/// standard error assumes the weights are exact inverse variances when the
/// residuals are consistent with them.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n || w.len() != n {
        return None;
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().zip(w).map(|(a, b)| b * (a - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    let rss: f64 =
        x.iter().zip(y).zip(w).map(|((a, c), b)| b * (c - intercept - slope * a).powi(2)).sum();
    let slope_se = (rss / (n as f64 - 2.0) / sxx).sqrt();
    Some(LineFit { slope, intercept, r2, slope_se, points: n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_matches_reference_values() {
        // Reference: 0 of 10 at 95% gives (0, 0.2775).
        let (lo, hi) = wilson_interval(0, 10, 1.959_963_984_540_054);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_54).abs() < 1e-4);
        let (lo, hi) = wilson_interval(50, 100, Z99);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ks_p_value_reference_points() {
        // The Kolmogorov distribution has P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01.
        let n = 1_000_000;
        let scale = (n as f64).sqrt() + 0.12 + 0.11 / (n as f64).sqrt();
        assert!((ks_p_value(1.3581 / scale, n) - 0.05).abs() < 1e-4);
        assert!((ks_p_value(1.6276 / scale, n) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-13);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(linear_fit(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_none());
    }

    #[test]
    fn normal_sample_passes_goodness_of_fit() {
        // Deterministic quantile grid: perfectly normal empirical law.
        let n = 1000;
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                let p = (i as f64 + 0.5) / n as f64;
                statrs::distribution::Normal::standard().inverse_cdf(p)
            })
            .collect();
        let d = ks_statistic(&xs, std_normal_cdf);
        assert!(d < 1.0 / n as f64);
        assert!(anderson_darling(&xs, std_normal_cdf) < 0.01);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.5).collect();
        assert!(ks_p_value(ks_statistic(&shifted, std_normal_cdf), n) < 1e-6);
        assert!(anderson_darling(&shifted, std_normal_cdf) > AD_CRITICAL_1PCT);
    }
}
