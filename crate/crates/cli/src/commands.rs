//! Subcommand implementations. Every command resolves its configuration as
//! flags > config file > defaults, saves the resolved form beside its
//! outputs, and writes results as both JSON and `metric,point,ci_low,
//! ci_high,n` CSV rows.

use crate::{
    DiseaseArgs, FitScalingArgs, LabelsArgs, PhenotypesArgs, PreprocessArgs, RetrievalArgs,
    SplitArgs, SynthArgs, TrainArgs, ZeroShotArgs,
};
use anyhow::{bail, Context, Result};
use ct_vlm::eval::{
    fit_power_law, load_prompt_sets, DiseaseFinetuneConfig, Direction, MetricReport,
    RetrievalConfig, TextField,
};
use ct_vlm::manifest::read_manifest;
use ct_vlm::model::{Backbone, StemConfig};
use ct_vlm::phenotype::{assign_disease_label, build_phenotype_vector, group_phenotypes, DiseaseTimeline};
use ct_vlm::pipeline;
use ct_vlm::synth::{generate_synthetic_cohort, planted_findings, SyntheticCohortSpec, TruthSidecar};
use ct_vlm::train::{train as run_train, Split, TrainConfig, TrainMode, VlmModel};
use ct_vlm::volume::PreprocessConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

fn load_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Append `metric,point,ci_low,ci_high,n` rows.
fn write_metric_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "point", "ci_low", "ci_high", "n"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.6}", r.point_estimate),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            r.n_boot.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => bail!("unknown split `{other}` (expected train|val|test|all)"),
    })
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticCohortSpec = match &args.config {
        Some(p) => load_json_file(p)?,
        None => SyntheticCohortSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.patients {
        spec.n_patients = n;
    }
    if let Some(shape) = &args.shape {
        if shape.len() != 3 {
            bail!("--shape needs exactly three comma-separated values");
        }
        spec.volume_shape = [shape[0], shape[1], shape[2]];
    }
    if let Some(p) = args.prevalence {
        spec.prevalence = p;
    }
    std::fs::create_dir_all(&args.out)?;
    let generated = generate_synthetic_cohort(&spec, &args.out)?;
    println!("cohort written to {}", generated.out_dir.display());
    println!("manifest: {}", generated.manifest.display());
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let cfg: PreprocessConfig = match &args.config {
        Some(p) => load_json_file(p)?,
        None => PreprocessConfig::default(),
    };
    std::fs::create_dir_all(&args.out)?;
    save_json(&args.out.join("resolved_preprocess.json"), &cfg)?;
    let manifest = pipeline::preprocess_cohort(&args.manifest, &cfg, &args.out)?;
    println!("preprocessed manifest: {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct LabelRow {
    encounter_id: String,
    patient_id: String,
    phenotype_indices: Vec<usize>,
    unmapped_codes: usize,
    disease_classes: BTreeMap<String, u8>,
}

pub fn labels(args: LabelsArgs) -> Result<()> {
    let cohort = pipeline::load_cohort(&args.manifest)?;
    let diseases: Vec<String> = args
        .diseases
        .clone()
        .unwrap_or_else(|| planted_findings().iter().map(|f| f.disease.clone()).collect());
    std::fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    for row in &cohort.rows {
        let (vector, diag) = build_phenotype_vector(&row.icd_codes, &cohort.table);
        let mut disease_classes = BTreeMap::new();
        for disease in &diseases {
            let t = DiseaseTimeline::new(
                row.disease_onsets.get(disease).copied(),
                row.scan_date,
                row.last_record_date,
            );
            disease_classes.insert(disease.clone(), assign_disease_label(&t)?.class_index() as u8);
        }
        rows.push(LabelRow {
            encounter_id: row.encounter_id.clone(),
            patient_id: row.patient_id.clone(),
            phenotype_indices: vector
                .bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect(),
            unmapped_codes: diag.unmapped,
            disease_classes,
        });
    }
    let mut f = std::fs::File::create(args.out.join("labels.jsonl"))?;
    for row in &rows {
        writeln!(f, "{}", serde_json::to_string(row)?)?;
    }
    save_json(&args.out.join("phecodes.json"), &cohort.table.phecodes().to_vec())?;
    save_json(&args.out.join("phenotype_groups.json"), &group_phenotypes(&cohort.table)?)?;
    println!("labels for {} encounters written", rows.len());
    Ok(())
}

pub fn split(args: SplitArgs) -> Result<()> {
    if args.ratios.len() != 3 {
        bail!("--ratios needs exactly three comma-separated values");
    }
    let ratios = (args.ratios[0], args.ratios[1], args.ratios[2]);
    let assignment = pipeline::split_manifest(&args.manifest, ratios, args.seed, &args.out)?;
    let mut counts = BTreeMap::new();
    for split in assignment.by_patient.values() {
        *counts.entry(format!("{split:?}")).or_insert(0usize) += 1;
    }
    println!("split manifest written to {} ({counts:?})", args.out.display());
    Ok(())
}

/// On-disk training configuration: the engine's config plus the architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub stem: StemConfig,
    pub backbone: Backbone,
    pub data_fraction: f64,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            train: TrainConfig::default(),
            stem: StemConfig::default(),
            backbone: Backbone::TinyResNet,
            data_fraction: 1.0,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss_contrastive: f64,
    final_loss_phenotype: f64,
    checksum: String,
    stage_boundaries: Vec<(String, usize, usize)>,
    n_train_samples: usize,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = match &args.config {
        Some(p) => load_json_file(p)?,
        None => TrainFileConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.train.mode = match mode.as_str() {
            "ehr" => TrainMode::EhrOnly,
            "report" => TrainMode::ReportOnly,
            "mtl" => TrainMode::Mtl,
            "staged" => TrainMode::Staged,
            other => bail!("unknown mode `{other}` (expected ehr|report|mtl|staged)"),
        };
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(bs) = args.batch_size {
        cfg.train.batch_size = bs;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(f) = args.data_fraction {
        cfg.data_fraction = f;
    }
    if args.no_split_reports {
        cfg.train.split_reports = false;
    }

    std::fs::create_dir_all(&args.out)?;
    save_json(&args.out.join("resolved_config.json"), &cfg)?;

    let cohort = pipeline::load_cohort(&args.manifest)?;
    let train_rows = if cfg.data_fraction < 1.0 {
        pipeline::data_fraction_rows(&cohort.rows, cfg.data_fraction, cfg.train.seed)?
    } else {
        cohort.rows.clone()
    };
    let has_splits = cohort.rows.iter().any(|r| r.split.is_some());
    let split = if has_splits { Some(Split::Train) } else { None };
    let samples: Vec<ct_vlm::train::TrainSample> =
        pipeline::assemble_samples(&cohort, &train_rows, split)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();

    let mut model = VlmModel::new(cfg.stem, cfg.backbone, cohort.table.len(), &cfg.train)?;
    let outcome = run_train(&mut model, &samples, &cfg.train)?;
    model.save(&args.out.join("model.ctwt"))?;
    outcome.write_curve_csv(&args.out.join("curve.csv"))?;

    let last = outcome.curve.last();
    let summary = TrainSummary {
        steps: outcome.curve.len(),
        final_loss_contrastive: last.map_or(0.0, |p| p.loss_contrastive),
        final_loss_phenotype: last.map_or(0.0, |p| p.loss_phenotype),
        checksum: format!("{:016x}", model.checksum()),
        stage_boundaries: outcome.stage_boundaries.clone(),
        n_train_samples: samples.len(),
    };
    save_json(&args.out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} steps on {} samples; model at {}",
        summary.steps,
        samples.len(),
        args.out.join("model.ctwt").display()
    );
    Ok(())
}

/// Rebuild the model skeleton that matches a training output directory and
/// load its weights.
fn load_model(model_path: &Path, n_phenotypes: usize) -> Result<VlmModel> {
    let cfg_path = model_path
        .parent()
        .map(|d| d.join("resolved_config.json"))
        .filter(|p| p.exists());
    let cfg: TrainFileConfig = match cfg_path {
        Some(p) => load_json_file(&p)?,
        None => TrainFileConfig::default(),
    };
    let mut model = VlmModel::new(cfg.stem, cfg.backbone, n_phenotypes, &cfg.train)?;
    model.load(model_path)?;
    Ok(model)
}

pub fn eval_zero_shot(args: ZeroShotArgs) -> Result<()> {
    let cohort = pipeline::load_cohort(&args.manifest)?;
    let base = cohort.base_dir.clone();
    let prompts = load_prompt_sets(&args.prompts.clone().unwrap_or_else(|| base.join("prompts.json")))?;
    let truth = TruthSidecar::load(&args.truth.clone().unwrap_or_else(|| base.join("truth.json")))?;
    let mut model = load_model(&args.model, cohort.table.len())?;
    let samples = pipeline::assemble_samples(&cohort, &cohort.rows, parse_split(&args.split)?)?;
    let report = pipeline::zero_shot_eval(&mut model, &samples, &truth, &prompts, args.seed, args.n_boot)?;

    std::fs::create_dir_all(&args.out)?;
    save_json(&args.out.join("zero_shot.json"), &report)?;
    let mut rows: Vec<(String, MetricReport)> = report
        .per_finding
        .iter()
        .map(|f| (format!("zero_shot_f1/{}", f.finding), f.f1))
        .collect();
    rows.push((
        "zero_shot_macro_f1".to_string(),
        MetricReport {
            point_estimate: report.macro_f1,
            ci_low: report.macro_f1,
            ci_high: report.macro_f1,
            n_boot: 0,
        },
    ));
    write_metric_csv(&args.out.join("zero_shot.csv"), &rows)?;
    println!("zero-shot macro F1: {:.4}", report.macro_f1);
    Ok(())
}

pub fn eval_retrieval(args: RetrievalArgs) -> Result<()> {
    let cohort = pipeline::load_cohort(&args.manifest)?;
    let mut model = load_model(&args.model, cohort.table.len())?;
    let samples = pipeline::assemble_samples(&cohort, &cohort.rows, parse_split(&args.split)?)?;
    let cfg = RetrievalConfig {
        pool_size: args.pool_size,
        k: args.k,
        direction: match args.direction.as_str() {
            "image-to-text" => Direction::ImageToText,
            "text-to-image" => Direction::TextToImage,
            other => bail!("unknown direction `{other}`"),
        },
        text_field: match args.text_field.as_str() {
            "findings" => TextField::Findings,
            "impressions" => TextField::Impressions,
            other => bail!("unknown text field `{other}`"),
        },
    };
    let report = pipeline::retrieval_eval(&mut model, &samples, &cohort.reports, &cfg, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    save_json(
        &args.out.join("retrieval.json"),
        &serde_json::json!({ "config": cfg, "recall": report }),
    )?;
    write_metric_csv(
        &args.out.join("retrieval.csv"),
        &[(
            format!("recall_at_{}_pool_{}", args.k, args.pool_size),
            report,
        )],
    )?;
    println!(
        "Recall@{} (N={}): {:.4} [{:.4}, {:.4}] over {} pools",
        args.k, args.pool_size, report.point_estimate, report.ci_low, report.ci_high, report.n_boot
    );
    Ok(())
}

pub fn eval_phenotypes(args: PhenotypesArgs) -> Result<()> {
    let cohort = pipeline::load_cohort(&args.manifest)?;
    let mut model = load_model(&args.model, cohort.table.len())?;
    let samples = pipeline::assemble_samples(&cohort, &cohort.rows, parse_split(&args.split)?)?;
    let report = pipeline::phenotype_eval(&mut model, &samples, args.min_positives, args.seed, args.n_boot)?;
    std::fs::create_dir_all(&args.out)?;
    save_json(&args.out.join("phenotypes.json"), &report)?;
    write_metric_csv(
        &args.out.join("phenotypes.csv"),
        &[
            ("phenotype_macro_auroc".to_string(), report.macro_auroc),
            ("phenotype_macro_auprc".to_string(), report.macro_auprc),
        ],
    )?;
    println!(
        "phenotype macro AUROC {:.4} / AUPRC {:.4} over {} retained phecodes",
        report.macro_auroc.point_estimate, report.macro_auprc.point_estimate, report.retained
    );
    Ok(())
}

pub fn eval_disease(args: DiseaseArgs) -> Result<()> {
    let cohort = pipeline::load_cohort(&args.manifest)?;
    let mut model = load_model(&args.model, cohort.table.len())?;
    let diseases: Vec<String> = args
        .diseases
        .clone()
        .unwrap_or_else(|| planted_findings().iter().map(|f| f.disease.clone()).collect());
    let cfg = DiseaseFinetuneConfig {
        epochs: args.epochs,
        seed: args.seed,
        n_boot: args.n_boot,
        ..Default::default()
    };
    let report = pipeline::disease_eval(&mut model, &cohort, &cohort.rows, &diseases, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_json(&args.out.join("disease.json"), &report)?;
    let rows: Vec<(String, MetricReport)> = report
        .per_disease
        .iter()
        .map(|(name, r)| (format!("disease_auroc/{name}"), *r))
        .collect();
    write_metric_csv(&args.out.join("disease.csv"), &rows)?;
    for (name, r) in &report.per_disease {
        println!("{name}: AUROC {:.4} [{:.4}, {:.4}]", r.point_estimate, r.ci_low, r.ci_high);
    }
    for name in &report.excluded {
        println!("{name}: excluded (missing class 0 or class 1 examples)");
    }
    Ok(())
}

pub fn fit_scaling(args: FitScalingArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column `{name}` missing from {}", args.input.display()))
    };
    let (mc, sc, vc) = (col("metric")?, col("size")?, col("value")?);
    let mut points: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        points.entry(record[mc].to_string()).or_default().push((
            record[sc].parse().context("size column must be numeric")?,
            record[vc].parse().context("value column must be numeric")?,
        ));
    }
    let mut fits = BTreeMap::new();
    for (metric, pts) in &points {
        let sizes: Vec<f64> = pts.iter().map(|(s, _)| *s).collect();
        let values: Vec<f64> = pts.iter().map(|(_, v)| *v).collect();
        fits.insert(metric.clone(), fit_power_law(&sizes, &values)?);
    }
    std::fs::create_dir_all(&args.out)?;
    save_json(
        &args.out.join("scaling.json"),
        &serde_json::json!({ "fits": fits, "points": points }),
    )?;
    let mut w = csv::Writer::from_path(args.out.join("scaling.csv"))?;
    w.write_record(["metric", "a", "b", "r2"])?;
    for (metric, fit) in &fits {
        w.write_record([
            metric.clone(),
            format!("{:.6}", fit.a),
            format!("{:.6}", fit.b),
            format!("{:.6}", fit.r2),
        ])?;
    }
    w.flush()?;
    for (metric, fit) in &fits {
        println!("{metric}: value = {:.4} * D^{:.4} (r2 {:.4})", fit.a, fit.b, fit.r2);
    }
    Ok(())
}

/// Re-exported for integration tests: resolve which manifest rows a split
/// selects.
pub fn manifest_split_counts(path: &PathBuf) -> Result<BTreeMap<String, usize>> {
    let rows = read_manifest(path, false)?;
    let mut counts = BTreeMap::new();
    for r in rows {
        let key = r.split.map_or("none".to_string(), |s| format!("{s:?}"));
        *counts.entry(key).or_insert(0usize) += 1;
    }
    Ok(counts)
}
