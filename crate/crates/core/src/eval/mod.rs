//! Evaluation suite: zero-shot findings classification, pooled cross-modal
//! retrieval, supervised metrics with bootstrap intervals, disease-prediction
//! finetuning, and scaling-law fits.

mod bootstrap;
mod disease;
mod metrics;
mod retrieval;
mod scaling;
mod zeroshot;

pub use bootstrap::{bootstrap_ci, bootstrap_ci_scores, MetricReport};
pub use disease::{
    finetune_disease_heads, DiseaseCohortItem, DiseaseEvalReport, DiseaseFinetuneConfig,
};
pub use metrics::{auprc, auroc, classification_metrics, f1_at_half, ClassificationMetrics};
pub use retrieval::{pooled_retrieval, Direction, RetrievalConfig, TextField};
pub use scaling::{fit_power_law, ScalingFit};
pub use zeroshot::{
    load_prompt_sets, pool_slice_similarities, zero_shot_classify, EncodedPromptSet, PromptSet,
    SlicePooling,
};

use crate::model::ImageEncoder;
use ndarray::{Array2, ArrayView3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("labels contain a single class (F1 = {f1})")]
    SingleClassLabels { f1: f64 },
    #[error("paired inputs disagree: {0} vs {1} rows")]
    PairedRows(usize, usize),
    #[error("top-k of {k} exceeds limit {limit}")]
    BadTopK { k: usize, limit: usize },
    #[error("pool size {pool} exceeds the {items} available items")]
    PoolTooLarge { pool: usize, items: usize },
    #[error("prompt list for `{0}` is empty")]
    EmptyPromptList(String),
    #[error("prompt file malformed: {0}")]
    BadPromptFile(String),
    #[error("power-law fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("power-law fit requires positive points, got ({size}, {value})")]
    NonPositiveFitPoint { size: f64, value: f64 },
    #[error(transparent)]
    Loss(#[from] crate::train::LossError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Embed a cohort of preprocessed volumes in batches, returning `[N, 512]`
/// contrastive embeddings.
pub fn embed_volumes(
    encoder: &mut ImageEncoder,
    volumes: &[ArrayView3<'_, f32>],
    batch_size: usize,
) -> Result<Array2<f32>, EvalError> {
    if volumes.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut out = Array2::zeros((volumes.len(), crate::model::EMBED_DIM));
    for (start, chunk) in volumes.chunks(batch_size.max(1)).enumerate() {
        let (emb, _) = encoder
            .encode_batch(chunk, None)
            .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
        let row0 = start * batch_size.max(1);
        for (i, row) in emb.rows().into_iter().enumerate() {
            out.row_mut(row0 + i).assign(&row);
        }
    }
    Ok(out)
}

/// Phecodes retained for macro metrics: strictly more than `min_positives`
/// positive examples in the test labels `[N, P]`.
pub fn phenotype_eval_filter(test_labels: &Array2<f32>, min_positives: usize) -> Vec<usize> {
    let mut retained = Vec::new();
    for p in 0..test_labels.ncols() {
        let positives = test_labels.column(p).iter().filter(|&&v| v == 1.0).count();
        if positives > min_positives {
            retained.push(p);
        }
    }
    retained
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_uses_strict_inequality() {
        // Column 0: 21 positives → retained; column 1: 20 → dropped.
        let mut labels = Array2::<f32>::zeros((30, 2));
        for i in 0..21 {
            labels[[i, 0]] = 1.0;
        }
        for i in 0..20 {
            labels[[i, 1]] = 1.0;
        }
        assert_eq!(phenotype_eval_filter(&labels, 20), vec![0]);
    }

    #[test]
    fn filter_matches_column_sum_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let labels = Array2::from_shape_fn((200, 30), |_| (rng.random_range(0..8) == 0) as u8 as f32);
        let got = phenotype_eval_filter(&labels, 20);
        let want: Vec<usize> = (0..30)
            .filter(|&p| {
                let mut count = 0;
                for i in 0..200 {
                    if labels[[i, p]] == 1.0 {
                        count += 1;
                    }
                }
                count > 20
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn embed_volumes_batches_consistently() {
        use crate::model::{build_image_encoder, Backbone, StemConfig};
        let mut enc = build_image_encoder(StemConfig::default(), Backbone::TinyResNet, 3).unwrap();
        let vols: Vec<ndarray::Array3<f32>> = (0..5)
            .map(|i| ndarray::Array3::from_elem((16, 16, 16), i as f32 / 5.0))
            .collect();
        let views: Vec<_> = vols.iter().map(|v| v.view()).collect();
        let all = embed_volumes(&mut enc, &views, 2).unwrap();
        let single = embed_volumes(&mut enc, &views, 5).unwrap();
        for (a, b) in all.iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
