//! Training engine: configuration, the combined vision-language model state,
//! multi-task and staged training loops, and patient-level splitting.

mod losses;
mod optim;
mod split;

pub use losses::{info_nce_loss, masked_bce_loss, InfoNceResult, LossError, MaskedBceResult};
pub use optim::{cosine_lr, exponential_lr, AdamW};
pub use split::{split_by_patient, Split, SplitAssignment, SplitError};

use crate::model::{build_image_encoder, Backbone, ImageEncoder, ModelError, StemConfig, TextEncoder};
use crate::nn::{Linear, Param, ParamInit};
use crate::report::{schedule_batch_text, BatchTextMode, SectionSchedule, SectionedReport};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mode {0:?} requires {1} but the batch lacks it")]
    MissingModality(TrainMode, &'static str),
    #[error("batch size must be >= 2 for contrastive steps, got {0}")]
    BatchTooSmall(usize),
    #[error("no training samples")]
    NoSamples,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("curve file error: {0}")]
    Io(#[from] std::io::Error),
}

/// Supervision mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    EhrOnly,
    ReportOnly,
    Mtl,
    Staged,
}

/// Training hyperparameters. Defaults follow the full-scale recipe; desk
/// runs override what they must (batch size, epochs, learning rate).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Cosine horizon in epochs (decay to zero).
    pub schedule_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// (contrastive, phenotype) weights for multi-task training.
    pub loss_weights: (f64, f64),
    pub staged_stage2_phenotype_weight: f64,
    pub stage1_epochs: usize,
    pub stage1_learning_rate: f64,
    pub stage1_gamma: f64,
    /// Alternate full reports and single anatomy sections when set; plain
    /// full-report batches otherwise.
    pub split_reports: bool,
    pub temperature_init: f64,
    pub temperature_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            schedule_epochs: 300,
            batch_size: 18,
            epochs: 300,
            seed: 0,
            mode: TrainMode::Mtl,
            loss_weights: (1.0, 1.0),
            staged_stage2_phenotype_weight: 0.1,
            stage1_epochs: 0,
            stage1_learning_rate: 1e-4,
            stage1_gamma: 0.99,
            split_reports: true,
            temperature_init: 1.0 / 0.07,
            temperature_max: 100.0,
        }
    }
}

/// Learnable similarity scale, stored in log space so it stays positive and
/// clamped to a maximum.
pub struct Temperature {
    pub log_scale: Param,
    pub max_scale: f32,
}

impl Temperature {
    pub fn new(init: f64, max: f64) -> Self {
        Temperature {
            log_scale: Param::new(
                "temperature.log_scale",
                &[1],
                ParamInit::Constant((init as f32).ln()),
                0,
            ),
            max_scale: max as f32,
        }
    }

    pub fn scale(&self) -> f32 {
        self.log_scale.value[[0]].exp().min(self.max_scale)
    }

    /// Chain a scale gradient into log space; a clamped scale gets none.
    fn accumulate_scale_grad(&mut self, d_scale: f32) {
        let raw = self.log_scale.value[[0]].exp();
        if raw < self.max_scale {
            let g = d_scale * raw;
            self.log_scale
                .accumulate_grad(ndarray::ArrayD::from_elem(vec![1], g));
        }
    }
}

/// One training example: preprocessed volume plus its supervision sources.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub volume: Array3<f32>,
    pub report: Option<SectionedReport>,
    /// Multi-hot phenotype vector aligned to the phecode table.
    pub phenotypes: Option<Vec<f32>>,
}

/// Image encoder, text encoder, phenotype head, and temperature — everything
/// a training mode can touch.
pub struct VlmModel {
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub phenotype_head: Linear,
    pub temperature: Temperature,
}

impl VlmModel {
    pub fn new(
        stem: StemConfig,
        backbone: Backbone,
        n_phenotypes: usize,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let image_encoder = build_image_encoder(stem, backbone, cfg.seed)?;
        let text_encoder = TextEncoder::default_desk(cfg.seed.wrapping_add(1));
        let phenotype_head = Linear::new(
            "phenotype_head",
            image_encoder.feature_channels,
            n_phenotypes,
            cfg.seed.wrapping_add(2),
        );
        Ok(VlmModel {
            image_encoder,
            text_encoder,
            phenotype_head,
            temperature: Temperature::new(cfg.temperature_init, cfg.temperature_max),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.image_encoder.params_mut();
        p.extend(self.text_encoder.params_mut());
        p.extend(self.phenotype_head.params_mut());
        p.push(&mut self.temperature.log_scale);
        p
    }

    /// FNV-1a over the little-endian bytes of every parameter, in parameter
    /// order. Equal checksums ⇔ bit-identical models.
    pub fn checksum(&mut self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params_mut() {
            for v in p.value.iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn save(&mut self, path: &std::path::Path) -> Result<(), ModelError> {
        let tensors: Vec<(String, ndarray::ArrayD<f32>)> = self
            .params_mut()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        crate::nn::save_checkpoint(path, &tensors)?;
        Ok(())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<(), ModelError> {
        let tensors = crate::nn::load_checkpoint(path)?;
        let lookup: std::collections::HashMap<String, ndarray::ArrayD<f32>> =
            tensors.into_iter().collect();
        for p in self.params_mut() {
            let t = lookup
                .get(&p.name)
                .ok_or_else(|| ModelError::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    file: t.shape().to_vec(),
                    model: p.value.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossComponents {
    pub total: f64,
    pub contrastive: f64,
    pub phenotype: f64,
}

/// One optimizer update. `step` selects the batch text (full findings on
/// even steps, a rotating anatomy section on odd steps) when report
/// splitting is active.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut VlmModel,
    optimizer: &mut AdamW,
    batch: &[&TrainSample],
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
    schedule: &SectionSchedule,
    mode: TrainMode,
    loss_weights: (f64, f64),
) -> Result<LossComponents, TrainError> {
    let needs_text = matches!(mode, TrainMode::ReportOnly | TrainMode::Mtl) && loss_weights.0 > 0.0;
    let needs_phenotypes =
        matches!(mode, TrainMode::EhrOnly | TrainMode::Mtl) && (mode == TrainMode::EhrOnly || loss_weights.1 > 0.0);
    if needs_text && batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    if needs_text && batch.iter().any(|s| s.report.is_none()) {
        return Err(TrainError::MissingModality(mode, "reports"));
    }
    if needs_phenotypes && batch.iter().any(|s| s.phenotypes.is_none()) {
        return Err(TrainError::MissingModality(mode, "phenotype vectors"));
    }

    let views: Vec<ndarray::ArrayView3<'_, f32>> = batch.iter().map(|s| s.volume.view()).collect();
    let x = ImageEncoder::stack_volumes(&views, None)?;
    let (pooled, _) = model.image_encoder.forward(&x, true);

    let mut contrastive = 0.0f64;
    let mut phenotype = 0.0f64;
    let mut d_embedding: Option<Array2<f32>> = None;
    let mut d_pooled_extra: Option<Array2<f32>> = None;

    if needs_text {
        let img_emb = model.image_encoder.project(&pooled, true);
        let reports: Vec<&SectionedReport> = batch.iter().map(|s| s.report.as_ref().unwrap()).collect();
        let (texts, _mode) = if cfg.split_reports {
            schedule_batch_text(step, &reports, schedule)
        } else {
            (
                reports.iter().map(|r| r.full_findings.clone()).collect(),
                BatchTextMode::Full,
            )
        };
        let text_refs: Vec<&str> = texts.iter().map(|t| t.as_str()).collect();
        let txt_emb = model.text_encoder.forward(&text_refs, true);
        let scale = model.temperature.scale();
        let nce = info_nce_loss(&img_emb, &txt_emb, scale)?;
        contrastive = nce.loss as f64;
        let w = loss_weights.0 as f32;
        d_embedding = Some(nce.d_img.mapv(|v| v * w));
        model.text_encoder.backward(&nce.d_txt.mapv(|v| v * w));
        model.temperature.accumulate_scale_grad(nce.d_scale * w);
    }

    if needs_phenotypes {
        let p = batch[0].phenotypes.as_ref().unwrap().len();
        let mut labels = Array2::<f32>::zeros((batch.len(), p));
        for (i, s) in batch.iter().enumerate() {
            let v = s.phenotypes.as_ref().unwrap();
            labels.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
        }
        let logits = model.phenotype_head.forward(&pooled, true);
        let mask = Array2::<f32>::ones(logits.raw_dim());
        let bce = masked_bce_loss(&logits, &labels, &mask)?;
        phenotype = bce.loss as f64;
        let w = if mode == TrainMode::EhrOnly { 1.0 } else { loss_weights.1 as f32 };
        let d_logits = bce.d_logits.mapv(|v| v * w);
        d_pooled_extra = Some(model.phenotype_head.backward(&d_logits));
    }

    model
        .image_encoder
        .backward(d_embedding.as_ref(), d_pooled_extra.as_ref());

    let mut params = model.params_mut();
    optimizer.step(&mut params, lr);

    let total = loss_weights.0 * contrastive + loss_weights.1 * phenotype;
    Ok(LossComponents {
        total,
        contrastive,
        phenotype,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss_contrastive: f64,
    pub loss_phenotype: f64,
}

/// Outcome of a training run.
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// (stage name, first epoch, last epoch exclusive).
    pub stage_boundaries: Vec<(String, usize, usize)>,
}

impl TrainOutcome {
    /// Write the curve as CSV: step, lr, loss_contrastive, loss_phenotype.
    pub fn write_curve_csv(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.into()))?;
        w.write_record(["step", "lr", "loss_contrastive", "loss_phenotype"])
            .map_err(|e| TrainError::Io(e.into()))?;
        for p in &self.curve {
            w.write_record([
                p.step.to_string(),
                format!("{:.8e}", p.lr),
                format!("{:.6}", p.loss_contrastive),
                format!("{:.6}", p.loss_phenotype),
            ])
            .map_err(|e| TrainError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_epochs(
    model: &mut VlmModel,
    optimizer: &mut AdamW,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mode: TrainMode,
    loss_weights: (f64, f64),
    epochs: usize,
    lr_for: impl Fn(u64, u64, usize) -> f64,
    global_step: &mut u64,
    curve: &mut Vec<CurvePoint>,
) -> Result<(), TrainError> {
    let schedule = SectionSchedule::default();
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = (steps_per_epoch * cfg.schedule_epochs.max(epochs)) as u64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && matches!(mode, TrainMode::ReportOnly | TrainMode::Mtl) {
                continue; // contrastive losses need at least one negative
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let lr = lr_for(*global_step, total_steps, epoch);
            let comp = train_step(
                model,
                optimizer,
                &batch,
                *global_step,
                lr,
                cfg,
                &schedule,
                mode,
                loss_weights,
            )?;
            curve.push(CurvePoint {
                step: *global_step,
                lr,
                loss_contrastive: comp.contrastive,
                loss_phenotype: comp.phenotype,
            });
            *global_step += 1;
        }
    }
    Ok(())
}

/// Train according to `cfg.mode`. Staged mode runs a phenotype-only stage
/// with exponential decay, then the contrastive stage with a small retained
/// phenotype weight; other modes run a single cosine-schedule phase.
pub fn train(
    model: &mut VlmModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut optimizer = AdamW::new(cfg.betas, cfg.weight_decay);
    let mut curve = Vec::new();
    let mut stage_boundaries = Vec::new();
    let mut global_step = 0u64;

    match cfg.mode {
        TrainMode::Staged => {
            let s1_lr = cfg.stage1_learning_rate;
            let gamma = cfg.stage1_gamma;
            run_epochs(
                model,
                &mut optimizer,
                samples,
                cfg,
                TrainMode::EhrOnly,
                (0.0, 1.0),
                cfg.stage1_epochs,
                |_, _, epoch| exponential_lr(epoch as u64, gamma, s1_lr),
                &mut global_step,
                &mut curve,
            )?;
            stage_boundaries.push(("stage1_ehr".to_string(), 0, cfg.stage1_epochs));
            let lr_max = cfg.learning_rate;
            run_epochs(
                model,
                &mut optimizer,
                samples,
                cfg,
                TrainMode::Mtl,
                (1.0, cfg.staged_stage2_phenotype_weight),
                cfg.epochs,
                move |step, total, _| cosine_lr(step, total, lr_max),
                &mut global_step,
                &mut curve,
            )?;
            stage_boundaries.push((
                "stage2_contrastive".to_string(),
                cfg.stage1_epochs,
                cfg.stage1_epochs + cfg.epochs,
            ));
        }
        mode => {
            let lr_max = cfg.learning_rate;
            run_epochs(
                model,
                &mut optimizer,
                samples,
                cfg,
                mode,
                cfg.loss_weights,
                cfg.epochs,
                move |step, total, _| cosine_lr(step, total, lr_max),
                &mut global_step,
                &mut curve,
            )?;
            stage_boundaries.push((format!("{mode:?}").to_lowercase(), 0, cfg.epochs));
        }
    }
    Ok(TrainOutcome {
        curve,
        stage_boundaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{split_sections, SectionPatterns};

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 1,
            schedule_epochs: 1,
            seed: 11,
            mode,
            ..Default::default()
        }
    }

    fn sample(value: f32, text: &str, phen: Vec<f32>) -> TrainSample {
        let patterns = SectionPatterns::builtin();
        TrainSample {
            volume: Array3::from_elem((16, 16, 16), value),
            report: Some(split_sections(text, &patterns).unwrap()),
            phenotypes: Some(phen),
        }
    }

    fn samples() -> Vec<TrainSample> {
        (0..8)
            .map(|i| {
                let pos = i % 2 == 0;
                sample(
                    if pos { 0.8 } else { 0.2 },
                    if pos { "LIVER: lesion present." } else { "LIVER: no lesion." },
                    vec![pos as u8 as f32, 1.0 - pos as u8 as f32],
                )
            })
            .collect()
    }

    #[test]
    fn ehr_only_leaves_text_encoder_untouched() {
        let cfg = tiny_cfg(TrainMode::EhrOnly);
        let mut model = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        let before: Vec<ndarray::ArrayD<f32>> = model
            .text_encoder
            .params_mut()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        train(&mut model, &samples(), &cfg).unwrap();
        let after: Vec<ndarray::ArrayD<f32>> = model
            .text_encoder
            .params_mut()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn mtl_with_zero_phenotype_weight_equals_report_only() {
        let mut cfg_a = tiny_cfg(TrainMode::Mtl);
        cfg_a.loss_weights = (1.0, 0.0);
        let mut model_a = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg_a).unwrap();
        train(&mut model_a, &samples(), &cfg_a).unwrap();

        let cfg_b = tiny_cfg(TrainMode::ReportOnly);
        let mut model_b = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg_b).unwrap();
        train(&mut model_b, &samples(), &cfg_b).unwrap();

        assert_eq!(model_a.checksum(), model_b.checksum());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_cfg(TrainMode::Mtl);
        let mut a = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        train(&mut a, &samples(), &cfg).unwrap();
        let mut b = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        train(&mut b, &samples(), &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn missing_modality_is_reported() {
        let cfg = tiny_cfg(TrainMode::Mtl);
        let mut model = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        let mut s = samples();
        for smp in &mut s {
            smp.phenotypes = None;
        }
        assert!(matches!(
            train(&mut model, &s, &cfg),
            Err(TrainError::MissingModality(TrainMode::Mtl, "phenotype vectors"))
        ));
    }

    #[test]
    fn staged_with_zero_stage1_equals_mtl_with_retained_weight() {
        let mut cfg_staged = tiny_cfg(TrainMode::Staged);
        cfg_staged.stage1_epochs = 0;
        cfg_staged.staged_stage2_phenotype_weight = 0.37;
        let mut a = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg_staged).unwrap();
        let out = train(&mut a, &samples(), &cfg_staged).unwrap();
        assert_eq!(out.stage_boundaries.len(), 2);
        assert_eq!(out.stage_boundaries[0], ("stage1_ehr".to_string(), 0, 0));

        let mut cfg_mtl = tiny_cfg(TrainMode::Mtl);
        cfg_mtl.loss_weights = (1.0, 0.37);
        let mut b = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg_mtl).unwrap();
        train(&mut b, &samples(), &cfg_mtl).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn loss_decreases_on_separable_batch() {
        let mut cfg = tiny_cfg(TrainMode::Mtl);
        cfg.epochs = 25;
        cfg.schedule_epochs = 50;
        cfg.learning_rate = 3e-3;
        let mut model = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        let out = train(&mut model, &samples(), &cfg).unwrap();
        let first: f64 = out.curve[..4].iter().map(|p| p.loss_contrastive + p.loss_phenotype).sum::<f64>() / 4.0;
        let last: f64 = out.curve[out.curve.len() - 4..]
            .iter()
            .map(|p| p.loss_contrastive + p.loss_phenotype)
            .sum::<f64>()
            / 4.0;
        assert!(last < first, "no learning: first {first} last {last}");
    }

    #[test]
    fn checkpoint_round_trip_restores_checksum() {
        let cfg = tiny_cfg(TrainMode::Mtl);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctwt");
        let mut a = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        train(&mut a, &samples(), &cfg).unwrap();
        let sum = a.checksum();
        a.save(&path).unwrap();
        let mut b = VlmModel::new(StemConfig::default(), Backbone::TinyResNet, 2, &cfg).unwrap();
        assert_ne!(b.checksum(), sum);
        b.load(&path).unwrap();
        assert_eq!(b.checksum(), sum);
    }
}
