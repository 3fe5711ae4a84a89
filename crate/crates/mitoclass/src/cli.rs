//! Command-line entry point: dataset synthesis, splitting, training,
//! cross-validation, evaluation, hyperparameter search and report emission.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags or config),
//! 2 on runtime failures (I/O, data, numerics). Diagnostics go to standard
//! error; machine-readable outputs go to files or standard output. The only
//! honored environment variable is `MITOCLASS_SEED`, which overrides the
//! seed when no `--seed` flag is given (precedence: flag > environment >
//! config file > built-in default).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_manifest, write_manifest, write_truth, Dataset, SyntheticConfig};
use crate::eval::{aggregate_folds, evaluate, FoldAggregate, MetricsReport};
use crate::hpo::{run_search, write_best_json, write_trials_csv, SearchSpace};
use crate::netcore::{load_checkpoint, ArchConfig, HardnessHeadMode, Model};
use crate::pixelpipe::{
    apply_policy, compute_hed_stats, write_pixel_dump, AugPolicy, HedStats, InputMode,
};
use crate::splits::{stratified_kfold, FoldAssignment};
use crate::trainer::{predictions_for_slice, train, RunConfigFile, TrainConfig, TrainResult};

pub const SEED_ENV_VAR: &str = "MITOCLASS_SEED";

#[derive(Debug)]
enum CliError {
    /// bad flags or config; exit code 1
    Usage(String),
    /// anything that failed while doing the work; exit code 2
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "mitoclass",
    about = "Imbalance-aware multi-head classification of atypical vs. normal mitotic figures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset (manifest + PNGs + truth.csv)
    Synth(SynthArgs),
    /// Compute a stratified k-fold assignment and write the fold file
    Split(SplitArgs),
    /// Train a single fold
    Train(TrainArgs),
    /// Train and evaluate all folds, then aggregate
    Cv(CvArgs),
    /// Evaluate a checkpoint against a manifest
    Eval(EvalArgs),
    /// Random-search hyperparameter optimization
    Hpo(HpoArgs),
    /// Summarize fold reports or trial tables
    Report(ReportArgs),
    /// Pixel-pipeline utilities
    Pixels(PixelsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of patches
    #[arg(long)]
    n: usize,
    /// Fraction of AMF-consensus patches
    #[arg(long, default_value_t = 0.1465)]
    amf_rate: f64,
    /// Fraction of hard (annotator-disagreement) patches
    #[arg(long, default_value_t = 0.137)]
    hard_rate: f64,
    /// Number of synthetic acquisition domains
    #[arg(long, default_value_t = 10)]
    n_domains: usize,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Manifest CSV to split
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output fold file
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameters shared by train/cv/hpo; unset flags fall back to the
/// config file, then to the built-in desk defaults.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// JSON config file (flags override its entries)
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate
    #[arg(long)]
    lr0: Option<f64>,
    /// Batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum number of epochs
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience (epochs past the best)
    #[arg(long)]
    patience: Option<usize>,
    /// Cosine-annealing floor
    #[arg(long)]
    eta_min: Option<f64>,
    /// Weight of the expert-loss mean vs. the hardness loss
    #[arg(long)]
    theta: Option<f64>,
    /// Focal-loss alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Focal-loss gamma
    #[arg(long)]
    gamma: Option<f64>,
    /// Dropout after the shared layer
    #[arg(long)]
    dropout: Option<f64>,
    /// AdamW decoupled weight decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Model input: rgb, rgb_hed or crop_rgb_hed
    #[arg(long)]
    input_mode: Option<String>,
    /// Hardness head: binary or four_class
    #[arg(long)]
    hardness_mode: Option<String>,
    /// Augmentation resize target (desk profile: 64)
    #[arg(long)]
    resize_to: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Fold file from `split` (computed from --k/--seed when omitted)
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Validation fold index
    #[arg(long)]
    fold: usize,
    /// Number of folds when no fold file is given
    #[arg(long)]
    k: Option<usize>,
    /// Output run directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct CvArgs {
    /// Manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Reuse an existing fold file instead of splitting
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Number of folds
    #[arg(long)]
    k: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to the validation slice of this fold file
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Fold index (requires --folds)
    #[arg(long)]
    fold: Option<usize>,
    /// Input mode override (defaults to the checkpoint's metadata)
    #[arg(long)]
    input_mode: Option<String>,
    /// Resize override (defaults to the checkpoint's metadata)
    #[arg(long)]
    resize_to: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HpoArgs {
    /// Manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Fold file (computed from --k/--seed when omitted)
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Number of folds when no fold file is given
    #[arg(long)]
    k: Option<usize>,
    /// Number of random-search trials
    #[arg(long)]
    trials: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Focal-alpha search range
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    alpha_range: Option<Vec<f64>>,
    /// Focal-gamma search range
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    gamma_range: Option<Vec<f64>>,
    /// Learning-rate search range (log-uniform)
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    lr_range: Option<Vec<f64>>,
    /// Dropout search range
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    dropout_range: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A `cv` output directory (fold_*/report.json)
    #[arg(long)]
    cv_dir: Option<PathBuf>,
    /// A `trials.csv` from `hpo`
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PixelsArgs {
    #[command(subcommand)]
    action: PixelsAction,
}

#[derive(Subcommand, Debug)]
enum PixelsAction {
    /// Write one patch's transformed tensor as f32 binary with a 16-byte
    /// header (magic, height, width, channels)
    Dump(PixelsDumpArgs),
}

#[derive(Args, Debug)]
struct PixelsDumpArgs {
    /// Manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Patch to transform
    #[arg(long)]
    patch_id: String,
    /// rgb, rgb_hed or crop_rgb_hed
    #[arg(long, default_value = "rgb")]
    mode: String,
    /// Augmentation stream seed
    #[arg(long)]
    seed: Option<u64>,
    /// Apply the random augmentations (default: resize + normalize only)
    #[arg(long, default_value_t = false)]
    augment: bool,
    /// Resize target
    #[arg(long, default_value_t = 64)]
    resize_to: usize,
    /// Output tensor file
    #[arg(long)]
    out: PathBuf,
}

/// Optional overrides loaded from `--config` JSON.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    lr0: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    eta_min: Option<f64>,
    theta: Option<f64>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    dropout: Option<f64>,
    weight_decay: Option<f64>,
    input_mode: Option<String>,
    hardness_mode: Option<String>,
    resize_to: Option<usize>,
    k: Option<usize>,
}

/// Everything a training-style run needs, fully resolved.
struct Resolved {
    train: TrainConfig,
    arch: ArchConfig,
    policy: AugPolicy,
    mode: InputMode,
    k: usize,
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV_VAR} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> CliResult<u64> {
    Ok(flag.or(env_seed()?).or(file).unwrap_or(0))
}

fn resolve(flags: &TrainFlags, k_flag: Option<usize>) -> CliResult<Resolved> {
    let file = load_file_config(flags.config.as_deref())?;

    let mode_name = flags
        .input_mode
        .clone()
        .or(file.input_mode.clone())
        .unwrap_or_else(|| "rgb".to_string());
    let mode = InputMode::parse(&mode_name)
        .ok_or_else(|| CliError::usage(format!("unknown input mode '{mode_name}'")))?;

    let hardness_name = flags
        .hardness_mode
        .clone()
        .or(file.hardness_mode.clone())
        .unwrap_or_else(|| "binary".to_string());
    let hardness = HardnessHeadMode::parse(&hardness_name)
        .ok_or_else(|| CliError::usage(format!("unknown hardness mode '{hardness_name}'")))?;

    let defaults = TrainConfig::default();
    let mut train = TrainConfig {
        seed: resolve_seed(flags.seed, file.seed)?,
        lr0: flags.lr0.or(file.lr0).unwrap_or(defaults.lr0),
        batch_size: flags
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: flags
            .max_epochs
            .or(file.max_epochs)
            .unwrap_or(defaults.max_epochs),
        patience: flags.patience.or(file.patience).unwrap_or(defaults.patience),
        eta_min: flags.eta_min.or(file.eta_min).unwrap_or(defaults.eta_min),
        theta: flags.theta.or(file.theta).unwrap_or(defaults.theta),
        weight_decay: flags
            .weight_decay
            .or(file.weight_decay)
            .unwrap_or(defaults.weight_decay),
        ..defaults
    };
    train.focal.alpha = flags.alpha.or(file.alpha).unwrap_or(train.focal.alpha);
    train.focal.gamma = flags.gamma.or(file.gamma).unwrap_or(train.focal.gamma);
    train.validate().map_err(CliError::usage)?;

    let mut arch = ArchConfig::desk(mode.channels(), hardness);
    arch.dropout = flags.dropout.or(file.dropout).unwrap_or(0.0);
    arch.validate().map_err(CliError::usage)?;

    let mut policy = AugPolicy::desk();
    policy.resize_to = flags.resize_to.or(file.resize_to).unwrap_or(64);
    policy.validate().map_err(CliError::usage)?;

    let k = k_flag.or(file.k).unwrap_or(5);
    Ok(Resolved {
        train,
        arch,
        policy,
        mode,
        k,
    })
}

fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    load_manifest(path).map_err(CliError::runtime)
}

fn obtain_folds(
    dataset: &Dataset,
    folds_file: Option<&Path>,
    k: usize,
    seed: u64,
) -> CliResult<FoldAssignment> {
    match folds_file {
        Some(p) => FoldAssignment::load(p).map_err(CliError::runtime),
        None => {
            if k < 2 || k > dataset.len() {
                return Err(CliError::usage(format!(
                    "invalid k={k} for a dataset of {} patches",
                    dataset.len()
                )));
            }
            stratified_kfold(dataset, k, seed).map_err(CliError::runtime)
        }
    }
}

fn hed_stats_if_needed(dataset: &Dataset, mode: InputMode) -> Option<HedStats> {
    (mode != InputMode::Rgb).then(|| compute_hed_stats(dataset))
}

fn check_fold_in_range(fold: usize, k: usize) -> CliResult<()> {
    if fold >= k {
        return Err(CliError::usage(format!(
            "invalid fold {fold}: folds run from 0 to {}",
            k - 1
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommand implementations
// ---------------------------------------------------------------------------

fn cmd_synth(args: &SynthArgs, err: &mut dyn Write) -> CliResult<()> {
    let cfg = SyntheticConfig {
        n_patches: args.n,
        amf_rate: args.amf_rate,
        hard_rate: args.hard_rate,
        n_domains: args.n_domains,
        seed: resolve_seed(args.seed, None)?,
    };
    cfg.validate().map_err(CliError::usage)?;
    mkdir(&args.out)?;
    let dataset = generate_synthetic(&cfg).map_err(CliError::runtime)?;
    let manifest = write_manifest(&dataset, &args.out).map_err(CliError::runtime)?;
    write_truth(&dataset, &args.out.join("truth.csv")).map_err(CliError::runtime)?;
    let cfg_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(args.out.join("synth_config.json"), cfg_json + "\n")
        .map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "synthesized {} patches into {} (manifest: {})",
        dataset.len(),
        args.out.display(),
        manifest.display()
    );
    Ok(())
}

fn cmd_split(args: &SplitArgs, err: &mut dyn Write) -> CliResult<()> {
    if args.k < 2 {
        return Err(CliError::usage(format!("k must be at least 2, got {}", args.k)));
    }
    let dataset = load_dataset(&args.manifest)?;
    let seed = resolve_seed(args.seed, None)?;
    let assignment = obtain_folds(&dataset, None, args.k, seed)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            mkdir(parent)?;
        }
    }
    assignment.write(&args.out).map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "wrote {}-fold assignment for {} patches to {}",
        args.k,
        dataset.len(),
        args.out.display()
    );
    Ok(())
}

/// Evaluates the best checkpoint of a trained fold on its validation slice.
fn evaluate_fold_dir(
    run_dir: &Path,
    dataset: &Dataset,
    assignment: &FoldAssignment,
    fold: usize,
    policy: &AugPolicy,
    mode: InputMode,
    hed: Option<&HedStats>,
) -> CliResult<MetricsReport> {
    let ckpt = run_dir.join("best.ckpt");
    let (params, _meta) = load_checkpoint(&ckpt).map_err(CliError::runtime)?;
    let model = Model::new(params.arch.clone()).map_err(CliError::runtime)?;
    let (_, val_ids) = crate::splits::fold_slices(assignment, fold).map_err(CliError::runtime)?;
    let preds = predictions_for_slice(&model, &params, dataset, &val_ids, policy, mode, hed)
        .map_err(CliError::runtime)?;
    preds
        .write_csv(&run_dir.join("predictions.csv"))
        .map_err(CliError::runtime)?;
    let report = evaluate(&preds).map_err(CliError::runtime)?;
    report
        .write_json(&run_dir.join("report.json"))
        .map_err(CliError::runtime)?;
    report
        .write_csv(&run_dir.join("report.csv"))
        .map_err(CliError::runtime)?;
    Ok(report)
}

fn cmd_train(args: &TrainArgs, err: &mut dyn Write) -> CliResult<()> {
    let resolved = resolve(&args.flags, args.k)?;
    if let Some(k) = args.k {
        check_fold_in_range(args.fold, k)?;
    }
    let dataset = load_dataset(&args.manifest)?;
    let assignment = obtain_folds(
        &dataset,
        args.folds.as_deref(),
        resolved.k,
        resolved.train.seed,
    )?;
    check_fold_in_range(args.fold, assignment.k())?;
    let hed = hed_stats_if_needed(&dataset, resolved.mode);
    mkdir(&args.out)?;
    let result = train(
        &dataset,
        &assignment,
        args.fold,
        &resolved.arch,
        &resolved.train,
        &resolved.policy,
        resolved.mode,
        hed.as_ref(),
        Some(&args.out),
    )
    .map_err(CliError::runtime)?;
    let report = evaluate_fold_dir(
        &args.out,
        &dataset,
        &assignment,
        args.fold,
        &resolved.policy,
        resolved.mode,
        hed.as_ref(),
    )?;
    let _ = writeln!(
        err,
        "fold {}: best epoch {} (val balanced accuracy {:.4}), report balanced accuracy {:.4}",
        args.fold, result.best_epoch, result.best_val_balanced_accuracy, report.balanced_accuracy
    );
    Ok(())
}

/// Top-level `config.json` of a cv/hpo run.
#[derive(Serialize)]
struct CvConfigFile<'a> {
    k: usize,
    #[serde(flatten)]
    run: &'a RunConfigFile,
}

#[derive(Serialize)]
struct CvFoldSummary {
    fold: usize,
    best_epoch: usize,
    best_val_balanced_accuracy: f64,
    epochs_run: usize,
    balanced_accuracy: f64,
    sensitivity: f64,
    specificity: f64,
    roc_auc: f64,
}

#[derive(Serialize)]
struct CvReportFile {
    k: usize,
    aggregate: FoldAggregate,
    folds: Vec<CvFoldSummary>,
}

fn cmd_cv(args: &CvArgs, err: &mut dyn Write) -> CliResult<()> {
    let resolved = resolve(&args.flags, args.k)?;
    let dataset = load_dataset(&args.manifest)?;
    let assignment = obtain_folds(
        &dataset,
        args.folds.as_deref(),
        resolved.k,
        resolved.train.seed,
    )?;
    let k = assignment.k();
    mkdir(&args.out)?;
    assignment
        .write(&args.out.join("folds.csv"))
        .map_err(CliError::runtime)?;

    let run_file = RunConfigFile {
        train: resolved.train.clone(),
        arch: resolved.arch.clone(),
        policy: resolved.policy.clone(),
        input_mode: resolved.mode,
    };
    let cfg_json = serde_json::to_string_pretty(&CvConfigFile { k, run: &run_file })
        .expect("config serializes");
    std::fs::write(args.out.join("config.json"), cfg_json + "\n").map_err(CliError::runtime)?;

    let hed = hed_stats_if_needed(&dataset, resolved.mode);

    // folds are independent; run them in parallel and collect in fold order
    let results: Vec<CliResult<(TrainResult, MetricsReport)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let run_dir = args.out.join(format!("fold_{fold}"));
            let result = train(
                &dataset,
                &assignment,
                fold,
                &resolved.arch,
                &resolved.train,
                &resolved.policy,
                resolved.mode,
                hed.as_ref(),
                Some(&run_dir),
            )
            .map_err(CliError::runtime)?;
            let report = evaluate_fold_dir(
                &run_dir,
                &dataset,
                &assignment,
                fold,
                &resolved.policy,
                resolved.mode,
                hed.as_ref(),
            )?;
            Ok((result, report))
        })
        .collect();

    let mut fold_summaries = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for (fold, r) in results.into_iter().enumerate() {
        let (result, report) = r?;
        let _ = writeln!(
            err,
            "fold {fold}: best epoch {} of {} run, val balanced accuracy {:.4}",
            result.best_epoch, result.epochs_run, result.best_val_balanced_accuracy
        );
        fold_summaries.push(CvFoldSummary {
            fold,
            best_epoch: result.best_epoch,
            best_val_balanced_accuracy: result.best_val_balanced_accuracy,
            epochs_run: result.epochs_run,
            balanced_accuracy: report.balanced_accuracy,
            sensitivity: report.sensitivity,
            specificity: report.specificity,
            roc_auc: report.roc_auc,
        });
        reports.push(report);
    }

    let aggregate = aggregate_folds(&reports).map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "cv balanced accuracy {} | roc auc {}",
        aggregate.balanced_accuracy.formatted, aggregate.roc_auc.formatted
    );
    let report_file = CvReportFile {
        k,
        aggregate,
        folds: fold_summaries,
    };
    let json = serde_json::to_string_pretty(&report_file).expect("report serializes");
    std::fs::write(args.out.join("cv_report.json"), json + "\n").map_err(CliError::runtime)?;

    let mut csv = String::from(
        "fold,best_epoch,epochs_run,best_val_balanced_accuracy,balanced_accuracy,sensitivity,specificity,roc_auc\n",
    );
    for s in &report_file.folds {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.fold,
            s.best_epoch,
            s.epochs_run,
            s.best_val_balanced_accuracy,
            s.balanced_accuracy,
            s.sensitivity,
            s.specificity,
            s.roc_auc
        ));
    }
    csv.push_str(&format!(
        "mean,,,,{},{},{},{}\n",
        report_file.aggregate.balanced_accuracy.mean,
        report_file.aggregate.sensitivity.mean,
        report_file.aggregate.specificity.mean,
        report_file.aggregate.roc_auc.mean
    ));
    csv.push_str(&format!(
        "std,,,,{},{},{},{}\n",
        report_file.aggregate.balanced_accuracy.std,
        report_file.aggregate.sensitivity.std,
        report_file.aggregate.specificity.std,
        report_file.aggregate.roc_auc.std
    ));
    std::fs::write(args.out.join("cv_report.csv"), csv).map_err(CliError::runtime)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, err: &mut dyn Write) -> CliResult<()> {
    if args.fold.is_some() != args.folds.is_some() {
        return Err(CliError::usage(
            "--fold and --folds must be given together",
        ));
    }
    let (params, meta) = load_checkpoint(&args.checkpoint).map_err(CliError::runtime)?;
    let model = Model::new(params.arch.clone()).map_err(CliError::runtime)?;

    let mode_name = args
        .input_mode
        .clone()
        .or_else(|| meta.get("input_mode").and_then(|v| v.as_str()).map(String::from))
        .unwrap_or_else(|| "rgb".to_string());
    let mode = InputMode::parse(&mode_name)
        .ok_or_else(|| CliError::usage(format!("unknown input mode '{mode_name}'")))?;
    if mode.channels() != params.arch.input_channels {
        return Err(CliError::usage(format!(
            "input mode {} feeds {} channels but the checkpoint expects {}",
            mode.as_str(),
            mode.channels(),
            params.arch.input_channels
        )));
    }
    let resize_to = args
        .resize_to
        .or_else(|| meta.get("resize_to").and_then(|v| v.as_u64()).map(|v| v as usize))
        .unwrap_or(64);
    let mut policy = AugPolicy::desk();
    policy.resize_to = resize_to;
    policy.validate().map_err(CliError::usage)?;

    let dataset = load_dataset(&args.manifest)?;
    let ids: Vec<String> = match (&args.folds, args.fold) {
        (Some(folds_path), Some(fold)) => {
            let assignment = FoldAssignment::load(folds_path).map_err(CliError::runtime)?;
            check_fold_in_range(fold, assignment.k())?;
            let (_, val) = crate::splits::fold_slices(&assignment, fold).map_err(CliError::runtime)?;
            val
        }
        _ => dataset.iter().map(|r| r.patch_id.clone()).collect(),
    };

    let hed = hed_stats_if_needed(&dataset, mode);
    mkdir(&args.out)?;
    let preds = predictions_for_slice(&model, &params, &dataset, &ids, &policy, mode, hed.as_ref())
        .map_err(CliError::runtime)?;
    preds
        .write_csv(&args.out.join("predictions.csv"))
        .map_err(CliError::runtime)?;
    let report = evaluate(&preds).map_err(CliError::runtime)?;
    report
        .write_json(&args.out.join("report.json"))
        .map_err(CliError::runtime)?;
    report
        .write_csv(&args.out.join("report.csv"))
        .map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "evaluated {} predictions: balanced accuracy {:.4}, roc auc {:.4}",
        preds.len(),
        report.balanced_accuracy,
        report.roc_auc
    );
    Ok(())
}

fn range_of(name: &str, flag: &Option<Vec<f64>>, default: (f64, f64)) -> CliResult<(f64, f64)> {
    match flag {
        None => Ok(default),
        Some(v) if v.len() == 2 => Ok((v[0], v[1])),
        Some(v) => Err(CliError::usage(format!(
            "--{name} takes exactly two values, got {}",
            v.len()
        ))),
    }
}

fn cmd_hpo(args: &HpoArgs, err: &mut dyn Write) -> CliResult<()> {
    let resolved = resolve(&args.flags, args.k)?;
    if args.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let defaults = SearchSpace::default();
    let space = SearchSpace {
        alpha: range_of("alpha-range", &args.alpha_range, defaults.alpha)?,
        gamma: range_of("gamma-range", &args.gamma_range, defaults.gamma)?,
        lr: range_of("lr-range", &args.lr_range, defaults.lr)?,
        dropout: range_of("dropout-range", &args.dropout_range, defaults.dropout)?,
    };
    space.validate().map_err(CliError::usage)?;

    let dataset = load_dataset(&args.manifest)?;
    let assignment = obtain_folds(
        &dataset,
        args.folds.as_deref(),
        resolved.k,
        resolved.train.seed,
    )?;
    let hed = hed_stats_if_needed(&dataset, resolved.mode);
    mkdir(&args.out)?;
    assignment
        .write(&args.out.join("folds.csv"))
        .map_err(CliError::runtime)?;
    let run_file = RunConfigFile {
        train: resolved.train.clone(),
        arch: resolved.arch.clone(),
        policy: resolved.policy.clone(),
        input_mode: resolved.mode,
    };
    let cfg = serde_json::json!({
        "k": assignment.k(),
        "trials": args.trials,
        "space": space,
        "base": run_file,
    });
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )
    .map_err(CliError::runtime)?;

    let (best, trials) = run_search(
        &dataset,
        &assignment,
        &resolved.arch,
        &resolved.train,
        &resolved.policy,
        resolved.mode,
        hed.as_ref(),
        &space,
        args.trials,
        resolved.train.seed,
    )
    .map_err(CliError::runtime)?;

    write_trials_csv(&args.out.join("trials.csv"), &trials, assignment.k())
        .map_err(CliError::runtime)?;
    match best {
        Some(id) => {
            let winner = &trials[id];
            write_best_json(&args.out.join("best.json"), winner).map_err(CliError::runtime)?;
            let _ = writeln!(
                err,
                "best trial {id}: mean balanced accuracy {:.4} (alpha={:.3}, gamma={:.3}, lr={:.2e}, dropout={:.3})",
                winner.objective.unwrap_or(f64::NAN),
                winner.config.alpha,
                winner.config.gamma,
                winner.config.lr,
                winner.config.dropout
            );
            Ok(())
        }
        None => Err(CliError::Runtime("every trial failed".into())),
    }
}

fn cmd_report(args: &ReportArgs, err: &mut dyn Write) -> CliResult<()> {
    if args.cv_dir.is_none() && args.trials.is_none() {
        return Err(CliError::usage(
            "report needs --cv-dir and/or --trials",
        ));
    }
    mkdir(&args.out)?;

    if let Some(cv_dir) = &args.cv_dir {
        let mut reports = Vec::new();
        let mut fold = 0usize;
        loop {
            let path = cv_dir.join(format!("fold_{fold}")).join("report.json");
            if !path.exists() {
                break;
            }
            reports.push(MetricsReport::read_json(&path).map_err(CliError::runtime)?);
            fold += 1;
        }
        if reports.is_empty() {
            return Err(CliError::runtime(format!(
                "no fold_*/report.json under {}",
                cv_dir.display()
            )));
        }
        let aggregate = aggregate_folds(&reports).map_err(CliError::runtime)?;
        let json = serde_json::to_string_pretty(&aggregate).expect("aggregate serializes");
        std::fs::write(args.out.join("summary.json"), json + "\n").map_err(CliError::runtime)?;

        let mut csv =
            String::from("metric,mean,std,formatted\n");
        for (name, m) in [
            ("balanced_accuracy", &aggregate.balanced_accuracy),
            ("sensitivity", &aggregate.sensitivity),
            ("specificity", &aggregate.specificity),
            ("roc_auc", &aggregate.roc_auc),
        ] {
            csv.push_str(&format!("{},{},{},\"{}\"\n", name, m.mean, m.std, m.formatted));
        }
        std::fs::write(args.out.join("summary.csv"), csv).map_err(CliError::runtime)?;
        let _ = writeln!(
            err,
            "summarized {} folds: balanced accuracy {}",
            reports.len(),
            aggregate.balanced_accuracy.formatted
        );
    }

    if let Some(trials_path) = &args.trials {
        let text = std::fs::read_to_string(trials_path).map_err(CliError::runtime)?;
        let mut complete = 0usize;
        let mut failed = 0usize;
        let mut best: Option<(usize, f64)> = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let status = fields.last().copied().unwrap_or_default();
            if status == "complete" {
                complete += 1;
                let id: usize = fields[0].parse().unwrap_or(usize::MAX);
                if let Some(mean) = fields
                    .get(fields.len() - 2)
                    .and_then(|v| v.parse::<f64>().ok())
                {
                    if best.map(|(_, b)| mean > b).unwrap_or(true) {
                        best = Some((id, mean));
                    }
                }
            } else if status == "failed" {
                failed += 1;
            }
        }
        let summary = serde_json::json!({
            "trials": complete + failed,
            "complete": complete,
            "failed": failed,
            "best_trial": best.map(|(id, _)| id),
            "best_mean_balanced_accuracy": best.map(|(_, b)| b),
        });
        std::fs::write(
            args.out.join("trials_summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
        )
        .map_err(CliError::runtime)?;
        let _ = writeln!(err, "summarized {} trials ({failed} failed)", complete + failed);
    }
    Ok(())
}

fn cmd_pixels_dump(args: &PixelsDumpArgs, err: &mut dyn Write) -> CliResult<()> {
    let mode = InputMode::parse(&args.mode)
        .ok_or_else(|| CliError::usage(format!("unknown input mode '{}'", args.mode)))?;
    let mut policy = AugPolicy::desk();
    policy.resize_to = args.resize_to;
    policy.enabled = args.augment;
    policy.validate().map_err(CliError::usage)?;

    let dataset = load_dataset(&args.manifest)?;
    let record = dataset
        .get(&args.patch_id)
        .ok_or_else(|| CliError::runtime(format!("patch '{}' not in manifest", args.patch_id)))?;
    let hed = hed_stats_if_needed(&dataset, mode);
    let seed = resolve_seed(args.seed, None)?;
    let tensor = apply_policy(record, &policy, mode, seed, hed.as_ref()).map_err(CliError::runtime)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            mkdir(parent)?;
        }
    }
    write_pixel_dump(&args.out, &tensor).map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "dumped {}x{}x{} tensor to {}",
        tensor.height,
        tensor.width,
        tensor.channels,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Runs the CLI against explicit writers; returns the process exit code.
pub fn run_cli_io(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    1
                }
            };
        }
    };

    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, err),
        Command::Split(a) => cmd_split(a, err),
        Command::Train(a) => cmd_train(a, err),
        Command::Cv(a) => cmd_cv(a, err),
        Command::Eval(a) => cmd_eval(a, err),
        Command::Hpo(a) => cmd_hpo(a, err),
        Command::Report(a) => cmd_report(a, err),
        Command::Pixels(a) => match &a.action {
            PixelsAction::Dump(d) => cmd_pixels_dump(d, err),
        },
    };

    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

/// Runs the CLI against the process's stdout/stderr.
pub fn run_cli(args: &[String]) -> i32 {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run_cli_io(args, &mut out, &mut err)
}
