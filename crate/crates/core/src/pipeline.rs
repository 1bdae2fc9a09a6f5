//! End-to-end orchestration: cohort loading, preprocessing, split
//! application, training-sample assembly, and the evaluation harnesses the
//! commands expose.

use crate::eval::{
    bootstrap_ci, bootstrap_ci_scores, f1_at_half, phenotype_eval_filter, pooled_retrieval,
    DiseaseCohortItem, DiseaseEvalReport, DiseaseFinetuneConfig, EncodedPromptSet, EvalError,
    MetricReport, PromptSet, RetrievalConfig, TextField,
};
use crate::manifest::{
    read_manifest, read_reports, write_manifest, ManifestError, ManifestRow, ReportRecord,
};
use crate::model::ImageEncoder;
use crate::phenotype::{build_phenotype_vector, DiseaseTimeline, PhecodeError, PhecodeTable};
use crate::report::{split_sections, ReportError, SectionPatterns};
use crate::synth::TruthSidecar;
use crate::train::{Split, SplitAssignment, TrainError, TrainSample, VlmModel};
use crate::volume::{pad_center_crop, preprocess, read_nifti, read_raw, write_raw, PreprocessConfig, VolumeError};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Phecode(#[from] PhecodeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("report record `{0}` missing from corpus")]
    MissingReport(String),
    #[error("data fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("no rows selected for split {0:?}")]
    EmptySplit(Split),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A manifest with its report corpus and phecode tables loaded.
pub struct LoadedCohort {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub reports: BTreeMap<String, ReportRecord>,
    pub table: PhecodeTable,
}

/// Load a cohort rooted at the manifest's directory. Tables are read from
/// `tables/icd_phecode.csv` and `tables/phecode_ranges.csv` beside it.
pub fn load_cohort(manifest_path: &Path) -> Result<LoadedCohort, PipelineError> {
    let rows = read_manifest(manifest_path, true)?;
    let base_dir = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut reports = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for row in &rows {
        if seen.insert(row.report_path.clone()) {
            reports.extend(read_reports(&base_dir.join(&row.report_path))?);
        }
    }
    let table = PhecodeTable::load_csv(
        &base_dir.join("tables/icd_phecode.csv"),
        &base_dir.join("tables/phecode_ranges.csv"),
    )?;
    Ok(LoadedCohort {
        base_dir,
        rows,
        reports,
        table,
    })
}

fn read_volume(path: &Path) -> Result<crate::volume::CTVolume, VolumeError> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path)
    } else {
        read_raw(path)
    }
}

/// Run the deterministic preprocessing pipeline over every row, writing
/// standardized volumes and a rebased manifest (plus the corpus files the
/// cohort needs) under `out_dir`. Volumes are processed in parallel.
pub fn preprocess_cohort(
    manifest_path: &Path,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let rows = read_manifest(manifest_path, true)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir.join("volumes"))?;

    let results: Vec<Result<ManifestRow, PipelineError>> = rows
        .par_iter()
        .map(|row| {
            let vol = read_volume(&base.join(&row.volume_path))?;
            let processed = preprocess(&vol, cfg)?;
            let rel = format!("volumes/{}.raw", row.encounter_id);
            write_raw(&processed, &out_dir.join(&rel))?;
            let mut new_row = row.clone();
            new_row.volume_path = rel;
            Ok(new_row)
        })
        .collect();
    let mut new_rows = Vec::with_capacity(results.len());
    for r in results {
        new_rows.push(r?);
    }

    // Carry the sidecar corpus files over so the output is self-contained.
    for rel in ["reports.jsonl", "prompts.json", "truth.json"] {
        let src = base.join(rel);
        if src.exists() {
            std::fs::copy(&src, out_dir.join(rel))?;
        }
    }
    let tables_src = base.join("tables");
    if tables_src.exists() {
        std::fs::create_dir_all(out_dir.join("tables"))?;
        for name in ["icd_phecode.csv", "phecode_ranges.csv"] {
            let p = tables_src.join(name);
            if p.exists() {
                std::fs::copy(&p, out_dir.join("tables").join(name))?;
            }
        }
    }
    let out_manifest = out_dir.join("manifest.jsonl");
    write_manifest(&out_manifest, &new_rows)?;
    Ok(out_manifest)
}

/// Assign splits to a manifest's patients and write the updated manifest.
pub fn split_manifest(
    manifest_path: &Path,
    ratios: (f64, f64, f64),
    seed: u64,
    out_path: &Path,
) -> Result<SplitAssignment, PipelineError> {
    let mut rows = read_manifest(manifest_path, false)?;
    let assignment = crate::train::split_by_patient(
        rows.iter().map(|r| r.patient_id.clone()),
        ratios,
        seed,
    )
    .map_err(|e| PipelineError::Io(std::io::Error::other(e.to_string())))?;
    for row in &mut rows {
        row.split = assignment.split_of(&row.patient_id);
    }
    write_manifest(out_path, &rows)?;
    Ok(assignment)
}

/// Nested data-fraction subset: the same seed's 10% patients are a subset of
/// its 20% patients, and so on.
pub fn data_fraction_rows(
    rows: &[ManifestRow],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestRow>, PipelineError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PipelineError::BadFraction(fraction));
    }
    let mut patients: Vec<String> = rows.iter().map(|r| r.patient_id.clone()).collect();
    patients.sort();
    patients.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let keep = ((fraction * patients.len() as f64).ceil() as usize).max(1);
    let kept: std::collections::HashSet<&String> = patients.iter().take(keep).collect();
    Ok(rows
        .iter()
        .filter(|r| kept.contains(&r.patient_id))
        .cloned()
        .collect())
}

/// Assemble training samples (volume + sectioned report + phenotype vector)
/// for the rows in `split` (or all rows when `None`). Returns encounter ids
/// alongside samples, in manifest order.
pub fn assemble_samples(
    cohort: &LoadedCohort,
    rows: &[ManifestRow],
    split: Option<Split>,
) -> Result<Vec<(String, TrainSample)>, PipelineError> {
    let patterns = SectionPatterns::builtin();
    let selected: Vec<&ManifestRow> = rows
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .collect();
    if selected.is_empty() {
        return Err(PipelineError::EmptySplit(split.unwrap_or(Split::Train)));
    }
    // Volume reads dominate; parallelize them, then build text/labels.
    let volumes: Vec<Result<crate::volume::CTVolume, VolumeError>> = selected
        .par_iter()
        .map(|row| read_volume(&cohort.base_dir.join(&row.volume_path)))
        .collect();
    let mut out = Vec::with_capacity(selected.len());
    for (row, vol) in selected.iter().zip(volumes) {
        let vol = vol?;
        let record = cohort
            .reports
            .get(&row.encounter_id)
            .ok_or_else(|| PipelineError::MissingReport(row.encounter_id.clone()))?;
        let sectioned = split_sections(&record.findings, &patterns)?;
        let (phen, _) = build_phenotype_vector(&row.icd_codes, &cohort.table);
        out.push((
            row.encounter_id.clone(),
            TrainSample {
                volume: vol.voxels,
                report: Some(sectioned),
                phenotypes: Some(phen.bits.iter().map(|&b| b as u8 as f32).collect()),
            },
        ));
    }
    Ok(out)
}

/// Per-finding zero-shot result.
#[derive(Debug, Clone, Serialize)]
pub struct FindingReport {
    pub finding: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub f1: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotReport {
    pub per_finding: Vec<FindingReport>,
    pub macro_f1: f64,
}

/// Zero-shot classification over a test cohort: per finding, classify each
/// volume by mean presence-vs-absence prompt similarity on a class-balanced
/// subset, and report F1 with a stratified bootstrap interval.
pub fn zero_shot_eval(
    model: &mut VlmModel,
    samples: &[(String, TrainSample)],
    truth: &TruthSidecar,
    prompts: &[PromptSet],
    seed: u64,
    n_boot: usize,
) -> Result<ZeroShotReport, PipelineError> {
    let views: Vec<ndarray::ArrayView3<'_, f32>> =
        samples.iter().map(|(_, s)| s.volume.view()).collect();
    let embeddings = crate::eval::embed_volumes(&mut model.image_encoder, &views, 16)?;

    let mut per_finding = Vec::new();
    for (fi, prompt_set) in prompts.iter().enumerate() {
        let encoded = EncodedPromptSet::encode(prompt_set, &mut model.text_encoder)?;
        let mut pos_idx = Vec::new();
        let mut neg_idx = Vec::new();
        for (i, (eid, _)) in samples.iter().enumerate() {
            let sev = truth.encounters[eid].severities[&prompt_set.finding_name];
            if sev > 0 {
                pos_idx.push(i);
            } else {
                neg_idx.push(i);
            }
        }
        // Balance classes by truncating the larger side after a seeded
        // shuffle, standardizing the chance level.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fi as u64);
        pos_idx.shuffle(&mut rng);
        neg_idx.shuffle(&mut rng);
        let n = pos_idx.len().min(neg_idx.len());
        let eval_idx: Vec<(usize, u8)> = pos_idx[..n]
            .iter()
            .map(|&i| (i, 1u8))
            .chain(neg_idx[..n].iter().map(|&i| (i, 0u8)))
            .collect();
        let mut scores = Vec::with_capacity(eval_idx.len());
        let mut labels = Vec::with_capacity(eval_idx.len());
        for &(i, y) in &eval_idx {
            let emb: Vec<f32> = embeddings.row(i).to_vec();
            scores.push(encoded.classify(&emb) as u8 as f64);
            labels.push(y);
        }
        let f1 = bootstrap_ci_scores(&scores, &labels, f1_at_half, n_boot, seed ^ (fi as u64) << 8)?;
        per_finding.push(FindingReport {
            finding: prompt_set.finding_name.clone(),
            n_pos: n,
            n_neg: n,
            f1,
        });
    }
    let macro_f1 = per_finding.iter().map(|f| f.f1.point_estimate).sum::<f64>()
        / per_finding.len().max(1) as f64;
    Ok(ZeroShotReport {
        per_finding,
        macro_f1,
    })
}

/// Embed test images and their report texts, then run pooled retrieval.
pub fn retrieval_eval(
    model: &mut VlmModel,
    samples: &[(String, TrainSample)],
    reports: &BTreeMap<String, ReportRecord>,
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<MetricReport, PipelineError> {
    let views: Vec<ndarray::ArrayView3<'_, f32>> =
        samples.iter().map(|(_, s)| s.volume.view()).collect();
    let img = crate::eval::embed_volumes(&mut model.image_encoder, &views, 16)?;
    let texts: Vec<String> = samples
        .iter()
        .map(|(eid, _)| {
            let rec = reports
                .get(eid)
                .ok_or_else(|| PipelineError::MissingReport(eid.clone()))?;
            Ok(match cfg.text_field {
                TextField::Findings => rec.findings.clone(),
                TextField::Impressions => rec.impressions.clone(),
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let text_refs: Vec<&str> = texts.iter().map(|t| t.as_str()).collect();
    let mut txt = Array2::zeros((text_refs.len(), crate::model::EMBED_DIM));
    for (chunk_idx, chunk) in text_refs.chunks(32).enumerate() {
        let emb = model.text_encoder.forward(chunk, false);
        for (i, row) in emb.rows().into_iter().enumerate() {
            txt.row_mut(chunk_idx * 32 + i).assign(&row);
        }
    }
    Ok(pooled_retrieval(img.view(), txt.view(), cfg, seed)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct PhenotypeReport {
    pub retained: usize,
    pub macro_auroc: MetricReport,
    pub macro_auprc: MetricReport,
}

/// Phenotype-head scores on the test set, macro-averaged over phecodes with
/// more than `min_positives` positive test examples; intervals bootstrap the
/// test rows.
pub fn phenotype_eval(
    model: &mut VlmModel,
    samples: &[(String, TrainSample)],
    min_positives: usize,
    seed: u64,
    n_boot: usize,
) -> Result<PhenotypeReport, PipelineError> {
    let n = samples.len();
    let p = samples[0].1.phenotypes.as_ref().expect("assembled samples").len();
    let mut labels = Array2::<f32>::zeros((n, p));
    for (i, (_, s)) in samples.iter().enumerate() {
        let v = s.phenotypes.as_ref().unwrap();
        labels
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&v[..]));
    }
    let retained = phenotype_eval_filter(&labels, min_positives);

    let views: Vec<ndarray::ArrayView3<'_, f32>> =
        samples.iter().map(|(_, s)| s.volume.view()).collect();
    let mut scores = Array2::<f64>::zeros((n, p));
    for (start, chunk) in views.chunks(16).enumerate() {
        let x = ImageEncoder::stack_volumes(chunk, None)
            .map_err(|e| PipelineError::Io(std::io::Error::other(e.to_string())))?;
        let (pooled, _) = model.image_encoder.forward(&x, false);
        let logits = model.phenotype_head.forward(&pooled, false);
        for (i, row) in logits.rows().into_iter().enumerate() {
            for (j, &z) in row.iter().enumerate() {
                scores[[start * 16 + i, j]] = 1.0 / (1.0 + (-z as f64).exp());
            }
        }
    }

    let macro_stat = |rows: &[usize], metric: fn(&[f64], &[u8]) -> Result<f64, EvalError>| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &pc in &retained {
            let s: Vec<f64> = rows.iter().map(|&i| scores[[i, pc]]).collect();
            let l: Vec<u8> = rows.iter().map(|&i| labels[[i, pc]] as u8).collect();
            if let Ok(v) = metric(&s, &l) {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    };
    let all_rows: Vec<usize> = (0..n).collect();
    let row_indices: Vec<f64> = all_rows.iter().map(|&i| i as f64).collect();
    let stat_auroc = |idx: &[f64]| {
        let rows: Vec<usize> = idx.iter().map(|&x| x as usize).collect();
        macro_stat(&rows, crate::eval::auroc)
    };
    let stat_auprc = |idx: &[f64]| {
        let rows: Vec<usize> = idx.iter().map(|&x| x as usize).collect();
        macro_stat(&rows, crate::eval::auprc)
    };
    let macro_auroc = bootstrap_ci(&row_indices, stat_auroc, n_boot, seed)?;
    let macro_auprc = bootstrap_ci(&row_indices, stat_auprc, n_boot, seed ^ 0xa5a5)?;
    Ok(PhenotypeReport {
        retained: retained.len(),
        macro_auroc,
        macro_auprc,
    })
}

/// Build the per-disease finetuning cohort from manifest rows.
pub fn disease_items(
    cohort: &LoadedCohort,
    rows: &[ManifestRow],
    split: Option<Split>,
    diseases: &[String],
) -> Result<Vec<DiseaseCohortItem>, PipelineError> {
    let selected: Vec<&ManifestRow> = rows
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .collect();
    if selected.is_empty() {
        return Err(PipelineError::EmptySplit(split.unwrap_or(Split::Train)));
    }
    let volumes: Vec<Result<crate::volume::CTVolume, VolumeError>> = selected
        .par_iter()
        .map(|row| read_volume(&cohort.base_dir.join(&row.volume_path)))
        .collect();
    let mut items = Vec::with_capacity(selected.len());
    for (row, vol) in selected.iter().zip(volumes) {
        let vol = vol?;
        let mut labels = BTreeMap::new();
        for disease in diseases {
            let t = DiseaseTimeline::new(
                row.disease_onsets.get(disease).copied(),
                row.scan_date,
                row.last_record_date,
            );
            let label = crate::phenotype::assign_disease_label(&t)
                .map_err(|e| PipelineError::Io(std::io::Error::other(e.to_string())))?;
            labels.insert(disease.clone(), label);
        }
        items.push(DiseaseCohortItem {
            volume: vol.voxels,
            labels,
        });
    }
    Ok(items)
}

/// Finetune and evaluate the disease heads for a cohort.
pub fn disease_eval(
    model: &mut VlmModel,
    cohort: &LoadedCohort,
    rows: &[ManifestRow],
    diseases: &[String],
    cfg: &DiseaseFinetuneConfig,
) -> Result<DiseaseEvalReport, PipelineError> {
    let train_items = disease_items(cohort, rows, Some(Split::Train), diseases)?;
    let test_items = disease_items(cohort, rows, Some(Split::Test), diseases)?;
    Ok(crate::eval::finetune_disease_heads(
        &mut model.image_encoder,
        &train_items,
        &test_items,
        diseases,
        cfg,
    )?)
}

/// Pad or crop an already-normalized volume to the model's expected shape
/// (used when evaluating volumes that skipped the full pipeline).
pub fn standardize_shape(volume: &crate::volume::CTVolume, shape: [usize; 3]) -> crate::volume::CTVolume {
    pad_center_crop(volume, shape, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_cohort, SyntheticCohortSpec};

    #[test]
    fn preprocess_and_assemble_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCohortSpec {
            n_patients: 12,
            volume_shape: [16, 16, 16],
            seed: 5,
            ..Default::default()
        };
        let gen = generate_synthetic_cohort(&spec, &dir.path().join("raw")).unwrap();
        let cfg = PreprocessConfig {
            target_shape: [16, 16, 16],
            ..Default::default()
        };
        let out = preprocess_cohort(&gen.manifest, &cfg, &dir.path().join("prep")).unwrap();
        let split_path = dir.path().join("prep/manifest.split.jsonl");
        split_manifest(&out, (0.6, 0.2, 0.2), 3, &split_path).unwrap();
        let cohort = load_cohort(&split_path).unwrap();
        let samples = assemble_samples(&cohort, &cohort.rows, Some(Split::Train)).unwrap();
        assert!(!samples.is_empty());
        let (_, s) = &samples[0];
        assert_eq!(s.volume.dim(), (16, 16, 16));
        for &v in s.volume.iter() {
            assert!((0.0..=1.0).contains(&v), "normalized voxels expected");
        }
        assert!(s.report.is_some());
        assert_eq!(
            s.phenotypes.as_ref().unwrap().len(),
            cohort.table.len()
        );
    }

    #[test]
    fn data_fractions_are_nested() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCohortSpec {
            n_patients: 40,
            volume_shape: [8, 8, 8],
            seed: 9,
            ..Default::default()
        };
        let gen = generate_synthetic_cohort(&spec, dir.path()).unwrap();
        let rows = read_manifest(&gen.manifest, false).unwrap();
        let mut prev: std::collections::HashSet<String> = std::collections::HashSet::new();
        for fraction in [0.1, 0.2, 0.4, 1.0] {
            let subset = data_fraction_rows(&rows, fraction, 17).unwrap();
            let ids: std::collections::HashSet<String> =
                subset.iter().map(|r| r.patient_id.clone()).collect();
            assert!(prev.is_subset(&ids), "fraction {fraction} not nested");
            prev = ids;
        }
        assert_eq!(prev.len(), 40);
    }
}
