//! Supervised classification metrics: threshold F1, rank-based AUROC, and
//! step-integrated AUPRC.

use super::EvalError;

/// F1 at the 0.5 decision threshold; 0.0 when no positives are predicted or
/// present.
pub fn f1_at_half(scores: &[f64], labels: &[u8]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s > 0.5;
        match (pred, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// AUROC via the rank statistic with average ranks for ties; identical to
/// concordant-pair counting with half credit for tied scores.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassLabels {
            f1: f1_at_half(scores, labels),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Average 1-based rank across the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &t in &idx[i..j] {
            if labels[t] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    Ok((rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve by step integration over descending
/// score thresholds (ties grouped).
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassLabels {
            f1: f1_at_half(scores, labels),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// All three metrics at once. Single-class label sets are an error carrying
/// the still-defined F1.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ClassificationMetrics {
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

pub fn classification_metrics(
    scores: &[f64],
    labels: &[u8],
) -> Result<ClassificationMetrics, EvalError> {
    Ok(ClassificationMetrics {
        f1: f1_at_half(scores, labels),
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_separation_maxes_all_metrics() {
        let scores = [0.9, 0.8, 0.95, 0.1, 0.2, 0.05];
        let labels = [1u8, 1, 1, 0, 0, 0];
        let m = classification_metrics(&scores, &labels).unwrap();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.auroc, 1.0);
        assert!((m.auprc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chance_scores_give_half_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.02, "auroc {a}");
    }

    #[test]
    fn single_class_is_an_error_with_f1() {
        let scores = [0.9, 0.8];
        let labels = [1u8, 1];
        match classification_metrics(&scores, &labels) {
            Err(EvalError::SingleClassLabels { f1 }) => assert_eq!(f1, 1.0),
            other => panic!("expected SingleClassLabels, got {other:?}"),
        }
    }

    /// O(n²) oracle: concordant pairs count 1, ties 0.5.
    fn auroc_pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yi != 1 || yj != 0 {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_matches_pair_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            // Quantized scores to force ties.
            let n = 200;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if labels.iter().all(|&y| y == labels[0]) {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pair_oracle(&scores, &labels);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..0.99)).collect();
        let labels: Vec<u8> = (0..100).map(|_| rng.random_range(0..2) as u8).collect();
        let a = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|&s| (5.0 * s).exp().ln() * 3.0 - 1.0).collect();
        let b = auroc(&warped, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auprc_on_known_small_case() {
        // Descending: (0.9,1), (0.8,0), (0.7,1), (0.6,0).
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [1u8, 0, 1, 0];
        // Steps: R 0.5 at P 1.0 → area 0.5; R 1.0 at P 2/3 → area += 0.5 * 2/3.
        let expect = 0.5 + 0.5 * (2.0 / 3.0);
        let got = auprc(&scores, &labels).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn f1_threshold_behaviour() {
        let scores = [0.6, 0.4, 0.51, 0.5];
        let labels = [1u8, 0, 1, 1];
        // preds: 1, 0, 1, 0 → tp=2 fp=0 fn=1.
        assert!((f1_at_half(&scores, &labels) - 2.0 * 2.0 / (2.0 * 2.0 + 0.0 + 1.0)).abs() < 1e-12);
    }
}
