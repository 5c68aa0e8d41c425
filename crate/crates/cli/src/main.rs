//! `miniclass` command-line driver.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 model or
//! backbone error, 4 evaluation error. Failures print one JSON object
//! `{"error": <code>, "message": <text>}` on standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use miniclass::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "miniclass", version, about = "Patch-based classifier for Persian miniature painting schools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a class-per-folder dataset and write `<out>/manifest.json`.
    Prepare {
        /// Dataset root with one folder per school.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the manifest.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Cut every image into five patches and cache their backbone features.
    Extract {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Train a head on every image and save a checkpoint in a new run directory.
    Train {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stratified k-fold cross-validation; writes report.json and confusion CSVs.
    Evaluate {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Number of folds.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, value_enum, default_value_t = FusionArg::Soft)]
        fusion: FusionArg,
    },
    /// Classify one image and print the patch and fused scores as JSON.
    Predict {
        /// Image file (PNG or JPEG).
        #[arg(long)]
        image: PathBuf,
        /// Backbone manifest path or `stub:<seed>:<dim>`.
        #[arg(long)]
        backbone: String,
        /// Head checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = FusionArg::Soft)]
        fusion: FusionArg,
    },
    /// Check a saved report and print its summary.
    Report {
        /// report.json written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Dataset root to scan.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Manifest written by `prepare`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BackboneArgs {
    /// Backbone manifest path or `stub:<seed>:<dim>`.
    #[arg(long)]
    backbone: String,
    /// Feature cache directory.
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Dropout rate after the hidden layer.
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Master seed; fold, initialization, shuffling and dropout seeds derive from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Parent directory for timestamped run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FusionArg {
    Soft,
    Hard,
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Input => 2,
        ErrorKind::Model => 3,
        ErrorKind::Evaluation => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let diagnostic = serde_json::json!({
                "error": err.code(),
                "message": err.to_string(),
            });
            eprintln!("{diagnostic}");
            ExitCode::from(exit_code(&err))
        }
    }
}
