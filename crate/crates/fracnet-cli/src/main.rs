//! Command-line pipeline: dataset preparation, training, evaluation,
//! reporting, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or runtime error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fracnet::data::{self, Split, SplitManifest};
use fracnet::metrics::MetricsBundle;
use fracnet::model::{self, ModelSpec};
use fracnet::params::Params;
use fracnet::report::{self, RunRecord};
use fracnet::train::{self, LoadedSplit, TrainConfig};
use fracnet::verify;

const RESULTS_ENV: &str = "FRACNET_RESULTS";

#[derive(Parser)]
#[command(
    name = "fracnet",
    about = "Train and evaluate an attention-augmented CNN on a two-class radiograph tree",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset tree, prune undecodable images, and write the split manifest.
    Prep(PrepArgs),
    /// Train a model against a split manifest and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write the metrics report.
    Eval(EvalArgs),
    /// Render the comparison table over a results directory.
    Report(ReportArgs),
    /// Run the full gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Dataset root containing Fractured/ and Non_fractured/.
    root: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated train,val,test ratios.
    #[arg(long, default_value = "0.80,0.115,0.085")]
    ratios: String,
    /// JSON object mapping relative paths to "train" | "val" | "test".
    #[arg(long)]
    fixed_splits: Option<PathBuf>,
    #[arg(long, default_value = "split.json")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Split manifest written by `prep`.
    manifest: PathBuf,
    /// Run configuration JSON; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to <results>/<run-id> where <results> is
    /// $FRACNET_RESULTS or ./results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (model.json + params.tnsr).
    checkpoint: PathBuf,
    /// Split manifest written by `prep`.
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics output path; defaults to metrics.json beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of run subdirectories (config.json + metrics.json each).
    results_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

/// Full run configuration: model assembly plus the training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model_name: String,
    width: usize,
    channels: usize,
    input_extent: usize,
    num_classes: usize,
    attention: bool,
    reduction: usize,
    dilation: usize,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_name: "bam_cnn".into(),
            width: 32,
            channels: 3,
            input_extent: model::DEFAULT_INPUT_EXTENT,
            num_classes: 2,
            attention: true,
            reduction: 16,
            dilation: 4,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failure(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

fn fail(err: impl std::fmt::Display) -> CliError {
    CliError::Failure(err.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Version/help requests are successes; anything else is usage.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(1);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::Prep(args) => run_prep(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "--ratios wants three comma-separated numbers, got {text:?}"
        )));
    }
    let mut values = [0.0f64; 3];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad ratio {part:?}")))?;
    }
    Ok((values[0], values[1], values[2]))
}

fn parse_split_name(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

fn run_prep(args: PrepArgs) -> Result<(), CliError> {
    let ratios = parse_ratios(&args.ratios)?;
    let fixed: Option<BTreeMap<String, Split>> = match &args.fixed_splits {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(fail)?;
            let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(fail)?;
            let mut map = BTreeMap::new();
            for (k, v) in raw {
                map.insert(k, parse_split_name(&v)?);
            }
            Some(map)
        }
        None => None,
    };

    let manifest = data::scan_dataset(&args.root).map_err(fail)?;
    let scanned = manifest.entries.len();
    let (pruned, rejected) = data::prune_corrupted(&manifest);
    let split =
        data::split_dataset(&pruned, ratios, args.seed, fixed.as_ref(), rejected).map_err(fail)?;
    let counts = split.counts();
    split.save(&args.out).map_err(fail)?;
    println!(
        "scanned {scanned}, accepted {}, rejected {}; split train/val/test = {}/{}/{} -> {}",
        split.entries.len(),
        split.rejected.len(),
        counts[0],
        counts[1],
        counts[2],
        args.out.display()
    );
    Ok(())
}

fn build_model(config: &RunConfig) -> Result<ModelSpec, CliError> {
    let backbone = model::build_backbone_with_input(
        config.width,
        config.channels,
        config.input_extent,
        config.input_extent,
    )
    .map_err(fail)?;
    let with_attention = if config.attention {
        model::insert_attention(&backbone, config.reduction, config.dilation).map_err(fail)?
    } else {
        backbone
    };
    let head = model::HeadConfig::default_for(
        model::pooled_features(&with_attention).map_err(fail)?,
        config.num_classes,
    );
    model::attach_head(&with_attention, &head).map_err(fail)
}

fn load_split_data(
    manifest: &SplitManifest,
    split: Split,
    channels: usize,
    extent: usize,
) -> Result<LoadedSplit, CliError> {
    let entries = manifest.entries_for(split);
    if entries.is_empty() {
        return Err(CliError::Failure(format!("split {split} is empty")));
    }
    let (images, labels) = data::load_entries(
        Path::new(&manifest.root),
        &entries,
        channels,
        (extent, extent),
    )
    .map_err(fail)?;
    Ok(LoadedSplit { images, labels })
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let config: RunConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(fail)?;
            serde_json::from_str(&text).map_err(fail)?
        }
        None => RunConfig::default(),
    };
    let manifest = SplitManifest::load(&args.manifest).map_err(fail)?;

    let run_dir = match args.out {
        Some(dir) => dir,
        None => {
            let results = std::env::var(RESULTS_ENV).unwrap_or_else(|_| "results".into());
            PathBuf::from(results).join(format!("run-{}-s{}", config.model_name, config.train.seed))
        }
    };

    let spec = build_model(&config)?;
    let mut params: Params<f32> = model::init_params(&spec, config.train.seed).map_err(fail)?;
    println!(
        "model {} with {} trainable parameters",
        config.model_name,
        model::param_count(&spec).map_err(fail)?
    );

    let train_data = load_split_data(
        &manifest,
        Split::Train,
        config.channels,
        config.input_extent,
    )?;
    let val_data = load_split_data(&manifest, Split::Val, config.channels, config.input_extent)?;
    println!(
        "training on {} images, validating on {}",
        train_data.len(),
        val_data.len()
    );

    let outcome =
        train::train(&spec, &mut params, &train_data, &val_data, &config.train).map_err(fail)?;

    std::fs::create_dir_all(&run_dir).map_err(fail)?;
    let config_json = serde_json::to_string_pretty(&config).map_err(fail)?;
    std::fs::write(run_dir.join("config.json"), format!("{config_json}\n")).map_err(fail)?;
    std::fs::write(run_dir.join("log.csv"), outcome.log.to_csv()).map_err(fail)?;
    train::save_checkpoint(
        &run_dir.join("checkpoint"),
        &spec,
        &outcome.best_params,
        &outcome.best_adam,
        &outcome.log,
    )
    .map_err(fail)?;
    report::emit_curves(&run_dir.join("log.csv"), &run_dir).map_err(fail)?;

    let last = outcome.log.records.last().expect("at least one epoch");
    println!(
        "done: {} epochs, best val loss {:.6} at epoch {}, final train acc {:.4} -> {}",
        outcome.log.records.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        last.train_acc,
        run_dir.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let split = parse_split_name(&args.split)?;
    let (spec, mut params) = train::load_checkpoint(&args.checkpoint).map_err(fail)?;
    let manifest = SplitManifest::load(&args.manifest).map_err(fail)?;
    let data = load_split_data(&manifest, split, spec.input_channels, spec.input_height)?;

    let counts = train::evaluate(&spec, &mut params, &data, 32).map_err(fail)?;
    let bundle = MetricsBundle::from_counts(counts).map_err(fail)?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.join("metrics.json"))
            .unwrap_or_else(|| PathBuf::from("metrics.json"))
    });
    let json = serde_json::to_string_pretty(&bundle).map_err(fail)?;
    std::fs::write(&out, format!("{json}\n")).map_err(fail)?;
    println!(
        "{split}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} (micro; tp {} fp {} tn {} fn {}) -> {}",
        bundle.micro.accuracy,
        bundle.micro.precision,
        bundle.micro.recall,
        bundle.micro.f1,
        counts.tp,
        counts.fp,
        counts.tn,
        counts.fn_,
        out.display()
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<(), CliError> {
    let mut run_dirs: Vec<PathBuf> = std::fs::read_dir(&args.results_dir)
        .map_err(fail)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.json").is_file() && p.join("metrics.json").is_file())
        .collect();
    run_dirs.sort();

    let mut records = Vec::new();
    for dir in &run_dirs {
        let config: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).map_err(fail)?)
                .map_err(fail)?;
        let bundle: MetricsBundle =
            serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).map_err(fail)?)
                .map_err(fail)?;
        let model_name = config
            .get("model_name")
            .and_then(|v| v.as_str())
            .unwrap_or("unnamed")
            .to_string();
        records.push(RunRecord {
            run_id: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            model: model_name,
            config,
            metrics: bundle.micro,
            log_path: dir.join("log.csv").display().to_string(),
        });
    }
    let comparison = report::write_comparison(&records, &args.results_dir).map_err(fail)?;
    print!("{}", comparison.text);
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let checks = verify::run_suite(args.seed).map_err(fail)?;
    let mut worst = 0.0f64;
    for check in &checks {
        worst = worst.max(check.max_rel_err);
        println!(
            "{:24} max_rel_err {:.3e} (tolerance {:.0e}) {}",
            check.name,
            check.max_rel_err,
            check.tolerance,
            if check.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("max relative error: {worst:.3e}");
    if verify::suite_passes(&checks) {
        Ok(())
    } else {
        Err(CliError::Failure("gradient-check suite failed".into()))
    }
}
