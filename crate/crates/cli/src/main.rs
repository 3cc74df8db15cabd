//! `fnn` — train and evaluate the forest-network kinship verifier.
//!
//! Subcommands cover the whole batch workflow: synthesizing an embedding
//! dataset, training a single fold, five-fold cross-validation, scoring a
//! checkpoint, finite-difference gradient verification, and dataset
//! inspection. Reports are line-oriented JSON; result tables go to stdout.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage errors.

mod summary;

use std::fmt;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fnn_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use fnn_core::config::RunConfig;
use fnn_core::data::{DatasetManifest, FoldFilter, Relationship};
use fnn_core::report::{format_cv_table, format_mean_table, jsonl_line, ReportRecord, RunHeader};
use fnn_core::synth::generate_synthetic;
use fnn_core::train::{
    evaluate, full_model_gradcheck, run_cross_validation, summarize_cv, train_fold,
};
use serde::Serialize;
use summary::RunSummary;

/// Threshold under which the gradient check is considered to pass.
const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "fnn",
    version,
    about = "Forest neural network for kinship verification over facial-component embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding manifest plus pairing protocol.
    GenSynth(GenSynthArgs),
    /// Train one fold of one relationship; reports epochs as JSON lines.
    Train(TrainArgs),
    /// Score a saved checkpoint on a pair selection.
    Eval(EvalArgs),
    /// Run the five-fold protocol and print the per-relationship summary.
    Cv(CvArgs),
    /// Verify analytic gradients of the full model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print dataset statistics as one JSON line.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Key=value config file; every key has a default, so the flag is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Embedding manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Pairing protocol (CSV).
    #[arg(long)]
    protocol: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of synthetic families (they rotate through the four
    /// relationship classes).
    #[arg(long, default_value_t = 50)]
    families: usize,
    /// Embedding dimensionality.
    #[arg(long = "d-in", default_value_t = 32)]
    d_in: usize,
    /// Within-family noise level.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to write the embedding manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the pairing protocol.
    #[arg(long)]
    protocol: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Relationship to train; must name a single one.
    #[arg(long, ignore_case = true)]
    relationship: RelArg,
    /// Held-out fold in 1..=5.
    #[arg(long, default_value_t = 1)]
    fold: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the trained parameters to this checkpoint file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to score; its config hash must match the resolved config.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, ignore_case = true, default_value = "all")]
    relationship: RelArg,
    /// Restrict scoring to one fold.
    #[arg(long)]
    fold: Option<u8>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, ignore_case = true, default_value = "all")]
    relationship: RelArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON run summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Embedding manifest; a small built-in synthetic set is used when absent.
    #[arg(long, requires = "protocol")]
    manifest: Option<PathBuf>,
    /// Pairing protocol accompanying --manifest.
    #[arg(long, requires = "manifest")]
    protocol: Option<PathBuf>,
    /// Seeds the synthetic probe data and the parameter initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of pairs in the probe batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Embedding manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Pairing protocol; statistics cover only the embeddings when absent.
    #[arg(long)]
    protocol: Option<PathBuf>,
}

/// `--relationship` accepts the four class codes or `all`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RelArg {
    #[value(name = "FS")]
    Fs,
    #[value(name = "FD")]
    Fd,
    #[value(name = "MS")]
    Ms,
    #[value(name = "MD")]
    Md,
    All,
}

impl RelArg {
    fn single(self) -> Option<Relationship> {
        match self {
            RelArg::Fs => Some(Relationship::FS),
            RelArg::Fd => Some(Relationship::FD),
            RelArg::Ms => Some(Relationship::MS),
            RelArg::Md => Some(Relationship::MD),
            RelArg::All => None,
        }
    }

    /// The relationships this selection covers within `manifest`.
    fn selected(self, manifest: &DatasetManifest) -> Vec<Relationship> {
        match self.single() {
            Some(rel) => vec![rel],
            None => manifest.relationships(),
        }
    }
}

/// Command-line mistakes that clap cannot catch; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        let code = if e.is::<UsageError>() { 2 } else { 1 };
        std::process::exit(code);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenSynth(args) => gen_synth(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Cv(args) => cv(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Inspect(args) => inspect(args),
    }
}

/// Defaults, then the config file, then `--set` overrides, then validation.
fn resolve_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(data: &DataArgs) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(&data.manifest, &data.protocol).with_context(|| {
        format!(
            "loading dataset from {} + {}",
            data.manifest.display(),
            data.protocol.display()
        )
    })
}

fn run_header(cfg: &RunConfig, seed: u64) -> ReportRecord {
    ReportRecord::Header(RunHeader {
        prediction_rule: "sigmoid(logit) > 0.5".to_string(),
        w_neg: cfg.w_neg,
        center_updates_enabled: cfg.w0 != 0.0,
        seed,
        config: cfg.canonical_string(),
    })
}

fn gen_synth(args: GenSynthArgs) -> anyhow::Result<()> {
    let manifest = generate_synthetic(args.families, args.d_in, args.noise, args.seed)?;
    manifest.write(&args.manifest, &args.protocol)?;
    let pairs = manifest.pair_indices(None, FoldFilter::All).len();
    println!(
        "wrote {} images ({} pairs) to {} + {}",
        manifest.embeddings.len(),
        pairs,
        args.manifest.display(),
        args.protocol.display()
    );
    Ok(())
}

fn require_single(rel: RelArg) -> anyhow::Result<Relationship> {
    rel.single().ok_or_else(|| {
        UsageError("this command needs a single relationship, not `all`".to_string()).into()
    })
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args.config)?;
    let relationship = require_single(args.relationship)?;
    let manifest = load_dataset(&args.data)?;

    print!("{}", jsonl_line(&run_header(&cfg, args.seed)));
    let run = train_fold(&manifest, &cfg, relationship, args.fold, args.seed)?;
    for epoch in &run.epochs {
        print!("{}", jsonl_line(&ReportRecord::Epoch(epoch.clone())));
    }
    let record = fnn_core::report::CvSummary {
        relationship: relationship.table_label().to_string(),
        seed: args.seed,
        config_sha256: fnn_core::checkpoint::config_hash_hex(&cfg),
        fold_accuracies: vec![run.test_accuracy],
        mean_accuracy: run.test_accuracy,
    };
    print!("{}", jsonl_line(&ReportRecord::CvSummary(record)));

    if let Some(out) = &args.out {
        save_checkpoint(out, &run.params, &cfg)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    record: &'static str,
    relationship: String,
    fold: Option<u8>,
    pairs: usize,
    accuracy: f64,
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args.config)?;
    let params = load_checkpoint_for(&args.checkpoint, &cfg)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let manifest = load_dataset(&args.data)?;
    let filter = match args.fold {
        Some(f) => FoldFilter::Only(f),
        None => FoldFilter::All,
    };
    let idx = manifest.pair_indices(args.relationship.single(), filter);
    let accuracy = evaluate(&params, &manifest, &idx)?;
    let report = EvalReport {
        record: "eval",
        relationship: match args.relationship.single() {
            Some(rel) => rel.code().to_string(),
            None => "all".to_string(),
        },
        fold: args.fold,
        pairs: idx.len(),
        accuracy,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cv(args: CvArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args.config)?;
    let manifest = load_dataset(&args.data)?;
    let mut summaries = Vec::new();
    for relationship in args.relationship.selected(&manifest) {
        let result = run_cross_validation(&manifest, &cfg, relationship, args.seed)?;
        summaries.push(summarize_cv(&cfg, &result));
    }

    print!("{}", format_mean_table(&summaries));
    println!();
    print!("{}", format_cv_table(&summaries));

    if let Some(out) = &args.out {
        let summary = RunSummary::new(&cfg, args.seed, summaries);
        std::fs::write(out, summary.to_json_line())
            .with_context(|| format!("writing summary {}", out.display()))?;
    }
    Ok(())
}

/// Reference dimensions for the gradient suite: small enough to probe every
/// coordinate quickly, large enough to exercise projection, all four layers,
/// and a multi-part family head.
fn gradcheck_reference_config() -> RunConfig {
    RunConfig { dh: 4, layers: 4, h1: 8, h2: 4, parts: 4, ..RunConfig::default() }
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = if args.config.config.is_none() && args.config.set.is_empty() {
        gradcheck_reference_config()
    } else {
        resolve_config(&args.config)?
    };
    let manifest = match (&args.manifest, &args.protocol) {
        (Some(m), Some(p)) => DatasetManifest::load(m, p)?,
        _ => generate_synthetic(6, 6, 0.1, args.seed)?,
    };
    if args.batch == 0 {
        return Err(UsageError("--batch must be at least 1".to_string()).into());
    }
    let idx = manifest.pair_indices(None, FoldFilter::All);
    let take = args.batch.min(idx.len());
    let report = full_model_gradcheck(&manifest, &cfg, &idx[..take], args.seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates (threshold {:.0e}); \
         worst at parameter {} coord {}: analytic {:.6e} vs numeric {:.6e}",
        report.max_rel_err,
        report.coords,
        GRADCHECK_THRESHOLD,
        report.worst_param,
        report.worst_coord,
        report.analytic,
        report.numeric
    );
    if report.max_rel_err >= GRADCHECK_THRESHOLD {
        anyhow::bail!(
            "gradient check failed: {:.3e} >= {:.0e}",
            report.max_rel_err,
            GRADCHECK_THRESHOLD
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RelationshipStats {
    relationship: &'static str,
    pairs: usize,
    positives: usize,
    negatives: usize,
    folds_assigned: bool,
}

#[derive(Serialize)]
struct InspectReport {
    record: &'static str,
    images: usize,
    d_in: usize,
    total_pairs: Option<usize>,
    relationships: Vec<RelationshipStats>,
}

fn inspect(args: InspectArgs) -> anyhow::Result<()> {
    let embeddings = fnn_core::data::load_manifest(&args.manifest)?;
    let mut report = InspectReport {
        record: "inspect",
        images: embeddings.len(),
        d_in: embeddings.d_in(),
        total_pairs: None,
        relationships: Vec::new(),
    };
    if let Some(protocol) = &args.protocol {
        let manifest = DatasetManifest::load(&args.manifest, protocol)?;
        report.total_pairs = Some(manifest.pairs.len());
        for rel in manifest.relationships() {
            let idx = manifest.pair_indices(Some(rel), FoldFilter::All);
            let positives = idx.iter().filter(|&&i| manifest.pairs[i].label).count();
            report.relationships.push(RelationshipStats {
                relationship: rel.code(),
                pairs: idx.len(),
                positives,
                negatives: idx.len() - positives,
                folds_assigned: idx.iter().all(|&i| manifest.pairs[i].fold.is_some()),
            });
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
