//! Multi-head 5-year disease prediction: masked BCE finetuning of one head
//! per disease on encoder features, evaluated by AUROC over the
//! healthy/progressor classes only.

use super::bootstrap::bootstrap_ci_scores;
use super::metrics::auroc;
use super::{EvalError, MetricReport};
use crate::model::ImageEncoder;
use crate::nn::{Linear, Param, ParamInit};
use crate::phenotype::DiseaseLabel;
use crate::train::{exponential_lr, masked_bce_loss, AdamW};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One finetuning example: a preprocessed volume plus its per-disease
/// timeline classes.
#[derive(Debug, Clone)]
pub struct DiseaseCohortItem {
    pub volume: Array3<f32>,
    pub labels: BTreeMap<String, DiseaseLabel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiseaseFinetuneConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_boot: usize,
}

impl Default for DiseaseFinetuneConfig {
    fn default() -> Self {
        DiseaseFinetuneConfig {
            learning_rate: 1e-5,
            gamma: 0.8,
            batch_size: 8,
            epochs: 40,
            seed: 0,
            n_boot: 1000,
        }
    }
}

/// Per-disease evaluation plus bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct DiseaseEvalReport {
    pub per_disease: BTreeMap<String, MetricReport>,
    /// Counts of [healthy, progressor, progressed, censored] per disease
    /// over train and test items combined.
    pub label_counts: BTreeMap<String, [usize; 4]>,
    /// Diseases skipped for lacking class-0 or class-1 examples.
    pub excluded: Vec<String>,
}

fn embed(encoder: &mut ImageEncoder, items: &[DiseaseCohortItem]) -> Array2<f32> {
    let mut features = Array2::zeros((items.len(), encoder.feature_channels));
    for (i, item) in items.iter().enumerate() {
        let views = vec![item.volume.view()];
        let x = ImageEncoder::stack_volumes(&views, None).expect("consistent shapes");
        let (pooled, _) = encoder.forward(&x, false);
        features.row_mut(i).assign(&pooled.row(0));
    }
    features
}

/// Build the 0/1 targets and mask for one batch: class 0 → 0, class 1 → 1,
/// classes 2/3 masked out.
fn targets_and_mask(
    items: &[&DiseaseCohortItem],
    diseases: &[String],
) -> (Array2<f32>, Array2<f32>) {
    let mut labels = Array2::<f32>::zeros((items.len(), diseases.len()));
    let mut mask = Array2::<f32>::zeros((items.len(), diseases.len()));
    for (i, item) in items.iter().enumerate() {
        for (d, name) in diseases.iter().enumerate() {
            match item.labels.get(name) {
                Some(DiseaseLabel::Healthy) => {
                    mask[[i, d]] = 1.0;
                }
                Some(DiseaseLabel::Progressor) => {
                    labels[[i, d]] = 1.0;
                    mask[[i, d]] = 1.0;
                }
                _ => {}
            }
        }
    }
    (labels, mask)
}

/// Finetune one masked multi-head probe on frozen encoder features and
/// report per-disease AUROC with stratified bootstrap intervals.
pub fn finetune_disease_heads(
    encoder: &mut ImageEncoder,
    train_items: &[DiseaseCohortItem],
    test_items: &[DiseaseCohortItem],
    diseases: &[String],
    cfg: &DiseaseFinetuneConfig,
) -> Result<DiseaseEvalReport, EvalError> {
    if train_items.is_empty() || test_items.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let train_feats = embed(encoder, train_items);
    let test_feats = embed(encoder, test_items);

    let mut label_counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for name in diseases {
        let mut counts = [0usize; 4];
        for item in train_items.iter().chain(test_items) {
            if let Some(l) = item.labels.get(name) {
                counts[l.class_index()] += 1;
            }
        }
        label_counts.insert(name.clone(), counts);
    }

    // Heads start at zero so early updates align with the class-separation
    // direction rather than initialization noise.
    let mut heads = Linear::new("disease_heads", encoder.feature_channels, diseases.len(), cfg.seed);
    heads.weight = Param::new(
        "disease_heads.weight",
        &[diseases.len(), encoder.feature_channels],
        ParamInit::Zeros,
        cfg.seed,
    );
    let mut opt = AdamW::new((0.9, 0.999), 0.0);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        let lr = exponential_lr(epoch as u64, cfg.gamma, cfg.learning_rate);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DiseaseCohortItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let mut x = Array2::<f32>::zeros((chunk.len(), encoder.feature_channels));
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&train_feats.row(i));
            }
            let (labels, mask) = targets_and_mask(&batch, diseases);
            let logits = heads.forward(&x, true);
            let bce = masked_bce_loss(&logits, &labels, &mask).map_err(EvalError::Loss)?;
            let _ = heads.backward(&bce.d_logits);
            let mut params = heads.params_mut();
            opt.step(&mut params, lr);
        }
    }

    let test_logits = heads.forward(&test_feats, false);
    let mut per_disease = BTreeMap::new();
    let mut excluded = Vec::new();
    for (d, name) in diseases.iter().enumerate() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, item) in test_items.iter().enumerate() {
            match item.labels.get(name) {
                Some(DiseaseLabel::Healthy) => {
                    scores.push(test_logits[[i, d]] as f64);
                    labels.push(0u8);
                }
                Some(DiseaseLabel::Progressor) => {
                    scores.push(test_logits[[i, d]] as f64);
                    labels.push(1u8);
                }
                _ => {}
            }
        }
        let has_both = labels.iter().any(|&y| y == 0) && labels.iter().any(|&y| y == 1);
        if !has_both {
            excluded.push(name.clone());
            continue;
        }
        let report = bootstrap_ci_scores(
            &scores,
            &labels,
            |s, l| auroc(s, l).unwrap_or(0.5),
            cfg.n_boot,
            cfg.seed ^ d as u64,
        )?;
        per_disease.insert(name.clone(), report);
    }
    Ok(DiseaseEvalReport {
        per_disease,
        label_counts,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_image_encoder, Backbone, StemConfig};

    fn item(value: f32, label: DiseaseLabel) -> DiseaseCohortItem {
        let mut labels = BTreeMap::new();
        labels.insert("ckd".to_string(), label);
        DiseaseCohortItem {
            volume: Array3::from_elem((16, 16, 16), value),
            labels,
        }
    }

    #[test]
    fn masked_classes_contribute_no_gradient() {
        let diseases = vec!["ckd".to_string()];
        let batch_items = [
            item(0.2, DiseaseLabel::Progressed),
            item(0.7, DiseaseLabel::Censored),
        ];
        let batch: Vec<&DiseaseCohortItem> = batch_items.iter().collect();
        let (labels, mask) = targets_and_mask(&batch, &diseases);
        assert_eq!(mask.sum(), 0.0);
        assert_eq!(labels.sum(), 0.0);
        let logits = Array2::from_elem((2, 1), 3.0f32);
        let bce = masked_bce_loss(&logits, &labels, &mask).unwrap();
        assert_eq!(bce.loss, 0.0);
        assert!(bce.d_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn planted_signal_reaches_high_auroc() {
        // Bright volumes progress; the pooled feature separates them linearly.
        let mut encoder = build_image_encoder(StemConfig::default(), Backbone::TinyResNet, 5).unwrap();
        let train: Vec<DiseaseCohortItem> = (0..32)
            .map(|i| {
                let pos = i % 2 == 0;
                item(
                    if pos { 0.85 } else { 0.15 },
                    if pos { DiseaseLabel::Progressor } else { DiseaseLabel::Healthy },
                )
            })
            .collect();
        let test: Vec<DiseaseCohortItem> = (0..16)
            .map(|i| {
                let pos = i % 2 == 1;
                item(
                    if pos { 0.8 } else { 0.2 },
                    if pos { DiseaseLabel::Progressor } else { DiseaseLabel::Healthy },
                )
            })
            .collect();
        let cfg = DiseaseFinetuneConfig {
            epochs: 10,
            n_boot: 200,
            ..Default::default()
        };
        let report =
            finetune_disease_heads(&mut encoder, &train, &test, &["ckd".to_string()], &cfg).unwrap();
        let auroc = report.per_disease["ckd"].point_estimate;
        assert!(auroc >= 0.9, "auroc {auroc}");
    }

    #[test]
    fn diseases_without_both_classes_are_excluded() {
        let mut encoder = build_image_encoder(StemConfig::default(), Backbone::TinyResNet, 5).unwrap();
        let train = vec![item(0.5, DiseaseLabel::Healthy), item(0.6, DiseaseLabel::Progressor)];
        let test = vec![item(0.5, DiseaseLabel::Healthy), item(0.4, DiseaseLabel::Censored)];
        let cfg = DiseaseFinetuneConfig {
            epochs: 1,
            n_boot: 10,
            ..Default::default()
        };
        let report =
            finetune_disease_heads(&mut encoder, &train, &test, &["ckd".to_string()], &cfg).unwrap();
        assert!(report.per_disease.is_empty());
        assert_eq!(report.excluded, vec!["ckd".to_string()]);
        assert_eq!(report.label_counts["ckd"], [2, 1, 0, 1]);
    }
}
