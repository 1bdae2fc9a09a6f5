//! Percentile bootstrap confidence intervals.

use super::EvalError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A point estimate with its 95% interval and the replicate count behind it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
}

/// Linear-interpolation percentile of sorted values, q in [0, 1].
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// 95% percentile interval over the raw values themselves (used for
/// pool-based retrieval intervals).
pub(crate) fn percentile_ci(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        percentile_sorted(&sorted, 0.025),
        percentile_sorted(&sorted, 0.975),
    )
}

/// Percentile bootstrap: resample with replacement `n_boot` times and take
/// the 2.5/97.5 percentiles of the replicated statistic. Deterministic for a
/// fixed seed.
pub fn bootstrap_ci(
    samples: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let point_estimate = statistic(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut replicates = Vec::with_capacity(n_boot);
    let mut buf = vec![0.0f64; n];
    for _ in 0..n_boot {
        for b in buf.iter_mut() {
            *b = samples[rng.random_range(0..n)];
        }
        replicates.push(statistic(&buf));
    }
    let (ci_low, ci_high) = percentile_ci(&replicates);
    Ok(MetricReport {
        point_estimate,
        ci_low,
        ci_high,
        n_boot,
    })
}

/// Stratified bootstrap for score/label pairs: positives and negatives are
/// resampled separately so rank statistics stay defined in every replicate.
pub fn bootstrap_ci_scores(
    scores: &[f64],
    labels: &[u8],
    statistic: impl Fn(&[f64], &[u8]) -> f64,
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(EvalError::EmptySamples);
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClassLabels {
            f1: super::metrics::f1_at_half(scores, labels),
        });
    }
    let point_estimate = statistic(scores, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replicates = Vec::with_capacity(n_boot);
    let mut s_buf = vec![0.0f64; scores.len()];
    let mut l_buf = vec![0u8; labels.len()];
    for _ in 0..n_boot {
        for i in 0..pos.len() {
            s_buf[i] = pos[rng.random_range(0..pos.len())];
            l_buf[i] = 1;
        }
        for i in 0..neg.len() {
            s_buf[pos.len() + i] = neg[rng.random_range(0..neg.len())];
            l_buf[pos.len() + i] = 0;
        }
        replicates.push(statistic(&s_buf, &l_buf));
    }
    let (ci_low, ci_high) = percentile_ci(&replicates);
    Ok(MetricReport {
        point_estimate,
        ci_low,
        ci_high,
        n_boot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn constant_samples_give_zero_width() {
        let r = bootstrap_ci(&[3.25; 40], mean, 1000, 7).unwrap();
        assert_eq!(r.point_estimate, 3.25);
        assert_eq!(r.ci_low, 3.25);
        assert_eq!(r.ci_high, 3.25);
    }

    #[test]
    fn balanced_binary_mean_ci_is_tight() {
        let samples: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let r = bootstrap_ci(&samples, mean, 1000, 11).unwrap();
        assert!(r.ci_low > 0.45 && r.ci_high < 0.55, "{r:?}");
        assert!(r.ci_low <= r.point_estimate && r.point_estimate <= r.ci_high);
    }

    #[test]
    fn same_seed_reproduces_bits() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let a = bootstrap_ci(&samples, mean, 1000, 99).unwrap();
        let b = bootstrap_ci(&samples, mean, 1000, 99).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&samples, mean, 1000, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            bootstrap_ci(&[], mean, 10, 0),
            Err(EvalError::EmptySamples)
        ));
    }

    #[test]
    fn stratified_bootstrap_keeps_auroc_defined() {
        let scores = [0.9, 0.8, 0.4, 0.3, 0.7, 0.2];
        let labels = [1u8, 1, 0, 0, 1, 0];
        let r = bootstrap_ci_scores(
            &scores,
            &labels,
            |s, l| super::super::metrics::auroc(s, l).unwrap(),
            500,
            3,
        )
        .unwrap();
        assert_eq!(r.point_estimate, 1.0);
        assert!(r.ci_low <= 1.0 && r.ci_high <= 1.0);
    }
}
