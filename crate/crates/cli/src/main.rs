//! `ctvlm`: reproducible commands over the CT vision-language pipeline.
//!
//! Subcommands: synth, preprocess, labels, split, train,
//! eval {zero-shot, retrieval, phenotypes, disease}, fit-scaling, report.
//! Failures print a machine-readable JSON object on stderr and exit 1;
//! usage errors exit 2.

mod commands;
mod report;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ctvlm", version, about = "3D CT vision-language pipeline")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (volumes, reports, codes, timelines).
    Synth(SynthArgs),
    /// Standardize volumes: reorient, resample, window, pad/crop.
    Preprocess(PreprocessArgs),
    /// Emit phenotype vectors, grouping, and disease labels per encounter.
    Labels(LabelsArgs),
    /// Assign patient-level train/val/test splits.
    Split(SplitArgs),
    /// Train the vision-language model.
    Train(TrainArgs),
    /// Evaluation protocols.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Fit power-law scaling curves from a long-format table.
    FitScaling(FitScalingArgs),
    /// Collect result files into tables and plots.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Zero-shot findings classification from prompt ensembles.
    ZeroShot(ZeroShotArgs),
    /// Pooled cross-modal retrieval (Recall@k).
    Retrieval(RetrievalArgs),
    /// Phenotype classification metrics from the trained head.
    Phenotypes(PhenotypesArgs),
    /// 5-year disease prediction finetuning and AUROC.
    Disease(DiseaseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the generated cohort.
    #[arg(long)]
    out: PathBuf,
    /// Cohort spec JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    /// Volume shape as X,Y,Z.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    #[arg(long)]
    prevalence: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Preprocessing config JSON (defaults to the standard pipeline).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LabelsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disease names to label (defaults to the synthetic catalog).
    #[arg(long, value_delimiter = ',')]
    diseases: Option<Vec<String>>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output manifest path (defaults to overwriting in place is refused;
    /// pass an explicit path).
    #[arg(long)]
    out: PathBuf,
    /// Ratios as train,val,test.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 0.2, 0.2])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train config JSON; flags override file values, file overrides defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ehr | report | mtl | staged.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Train on a nested patient subset (e.g. 0.1); validation is untouched.
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Disable full-report/section alternation.
    #[arg(long)]
    no_split_reports: bool,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Prompt sets JSON (defaults to prompts.json beside the manifest).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Ground-truth sidecar (defaults to truth.json beside the manifest).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
    /// Evaluate this split (train|val|test|all).
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pool_size: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// image-to-text | text-to-image.
    #[arg(long, default_value = "image-to-text")]
    direction: String,
    /// findings | impressions.
    #[arg(long, default_value = "findings")]
    text_field: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PhenotypesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Retain phecodes with strictly more than this many test positives.
    #[arg(long, default_value_t = 20)]
    min_positives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct DiseaseArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    diseases: Option<Vec<String>>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
}

#[derive(Args)]
struct FitScalingArgs {
    /// Long-format CSV with header `metric,size,value`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding result JSON files from eval/fit-scaling runs.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Worker count never changes results; parallel loops write disjoint
        // regions in fixed order.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let (name, outcome): (&str, anyhow::Result<()>) = match cli.command {
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Preprocess(a) => ("preprocess", commands::preprocess(a)),
        Command::Labels(a) => ("labels", commands::labels(a)),
        Command::Split(a) => ("split", commands::split(a)),
        Command::Train(a) => ("train", commands::train(a)),
        Command::Eval(EvalCommand::ZeroShot(a)) => ("eval zero-shot", commands::eval_zero_shot(a)),
        Command::Eval(EvalCommand::Retrieval(a)) => ("eval retrieval", commands::eval_retrieval(a)),
        Command::Eval(EvalCommand::Phenotypes(a)) => ("eval phenotypes", commands::eval_phenotypes(a)),
        Command::Eval(EvalCommand::Disease(a)) => ("eval disease", commands::eval_disease(a)),
        Command::FitScaling(a) => ("fit-scaling", commands::fit_scaling(a)),
        Command::Report(a) => ("report", report::emit_report(a)),
    };
    if let Err(err) = outcome {
        let payload = serde_json::json!({
            "command": name,
            "error": err.to_string(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
