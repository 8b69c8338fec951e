//! Small statistics toolkit shared by the experiments.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default number of batches for batch-means standard errors.
pub const DEFAULT_BATCHES: usize = 30;

/// Sample mean and its naive standard error.
pub fn mean_se(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = data.iter().sum::<f64>() / n;
    if data.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Estimate with a batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchEstimate {
    pub mean: f64,
    pub se: f64,
    pub batches: usize,
    /// False when too few batches were available for a trustworthy SE.
    pub reliable: bool,
}

/// Batch means over contiguous blocks; the tail that does not fill a batch
/// is dropped from the SE but kept in the mean.
pub fn batch_means(data: &[f64], batches: usize) -> BatchEstimate {
    let n = data.len();
    let mean = if n == 0 { f64::NAN } else { data.iter().sum::<f64>() / n as f64 };
    let b = batches.min(n).max(1);
    let size = n / b;
    if size == 0 || b < 2 {
        return BatchEstimate { mean, se: f64::NAN, batches: b, reliable: false };
    }
    let means: Vec<f64> = data.chunks_exact(size).take(b).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let (_, se) = mean_se(&means);
    BatchEstimate { mean, se, batches: b, reliable: b >= 10 }
}

/// Welch two-sample z-score `(a - b)/sqrt(se_a² + se_b²)`.
pub fn welch_z(mean_a: f64, se_a: f64, mean_b: f64, se_b: f64) -> f64 {
    let d = mean_a - mean_b;
    let s = (se_a * se_a + se_b * se_b).sqrt();
    if s > 0.0 {
        d / s
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

/// z-score of `estimate` against `target`; 0 when both agree exactly.
pub fn z_score(estimate: f64, se: f64, target: f64) -> f64 {
    welch_z(estimate, se, target, 0.0)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided threshold `Φ^{-1}(1 - α/(2m))` for `m` simultaneous tests at
/// family-wise level `α`.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> f64 {
    std_normal().inverse_cdf(1.0 - alpha / (2.0 * m.max(1) as f64))
}

/// Family-wise level of a single two-sided test at `|z| < z0`.
pub fn two_sided_level(z0: f64) -> f64 {
    2.0 * (1.0 - std_normal().cdf(z0))
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `N(mean, sd²)`; returns `(D, p)`.
pub fn ks_normal(data: &[f64], mean: f64, sd: f64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("KS test needs data".into()));
    }
    let dist = Normal::new(mean, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut xs = data.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let p = kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
    Ok((d, p))
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Coefficient of variation `sd/|mean|`.
pub fn relative_spread(data: &[f64]) -> f64 {
    let (mean, se) = mean_se(data);
    se * (data.len() as f64).sqrt() / mean.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mean_and_se() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn batch_means_flags_degenerate_input() {
        let e = batch_means(&[1.0], 30);
        assert!(!e.reliable);
        assert!(e.se.is_nan());
        let data: Vec<f64> = (0..300).map(|i| (i % 7) as f64).collect();
        let e = batch_means(&data, 30);
        assert!(e.reliable && e.se.is_finite());
    }

    #[test]
    fn injected_mean_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..10_000).map(|_| 1.5 + rng.sample::<f64, _>(StandardNormal)).collect();
        let e = batch_means(&data, DEFAULT_BATCHES);
        assert!(z_score(e.mean, e.se, 1.5).abs() < 4.0);
        assert!(z_score(e.mean, e.se, 1.8).abs() > 4.0);
    }

    #[test]
    fn z_zero_for_exact_match() {
        assert_eq!(z_score(0.0, 0.0, 0.0), 0.0);
        assert_eq!(welch_z(1.0, 0.5, 1.0, 0.5), 0.0);
    }

    #[test]
    fn thresholds() {
        assert!((bonferroni_threshold(0.05, 1) - 1.959963984540054).abs() < 1e-9);
        assert!(bonferroni_threshold(two_sided_level(3.0), 12) > 3.0);
        assert!((two_sided_level(3.0) - 0.0026997960632601866).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail() {
        // Known value P(K > 1.36) ≈ 0.0494.
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 1e-3);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn ks_accepts_and_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        assert!(ks_normal(&xs, 0.0, 1.0).unwrap().1 > 0.001);
        assert!(ks_normal(&xs, 0.3, 1.0).unwrap().1 < 1e-6);
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, b) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-14 && (b + 1.0).abs() < 1e-14);
    }
}
