//! `s4ecg` command line: corpus synthesis, preprocessing, patient splits, training,
//! evaluation, prediction, band plots and paired model comparison. Every command writes a
//! [`manifest::RunManifest`].

pub mod config;
pub mod manifest;

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "s4ecg", version, about = "Multi-epoch ECG rhythm classification", arg_required_else_help = true)]
pub struct Cli {
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic WFDB corpus.
    Synth(SynthArgs),
    /// Resample and label a WFDB directory into a dataset archive.
    Preprocess(PreprocessArgs),
    /// Assign a patient-level train/validation/test split to an archive.
    Split(SplitArgs),
    /// Train a model on the training partition of an archive.
    Train(TrainArgs),
    /// Score a checkpoint on an archive partition and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Write per-epoch class probabilities as CSV.
    Predict(PredictArgs),
    /// Render a rhythm-band CSV as SVG.
    Plot(PlotArgs),
    /// Paired patient bootstrap of the macro-AUROC difference of two checkpoints.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus description (JSON, or TOML for any other extension); the built-in desk-study
    /// corpus when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub minutes: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated class labels in output order (N, AF, AFLT, SVTA).
    #[arg(long, default_value = "N,AF,AFLT")]
    pub classes: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Annotation file extension.
    #[arg(long, default_value = "atr")]
    pub ann: String,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Train, validation and test weights.
    #[arg(long, default_value = "8,1,1")]
    pub ratios: String,
    #[arg(long)]
    pub seed: u64,
    /// Archive to write; the input archive is updated in place when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Flat key = value file of model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Epochs per input window.
    #[arg(long)]
    pub epochs_in: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Passes over the training crops.
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// Any config key, as key=value; applied after the other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration, input size and parameter count, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub partition: PartitionArg,
    /// Sliding-window stride in epochs.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub report: PathBuf,
    /// Bootstrap iterations for confidence intervals; 0 skips them.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Required when bootstrapping.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for per-record rhythm bands (CSV and SVG).
    #[arg(long)]
    pub bands: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset archive to score.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub data: Option<PathBuf>,
    /// WFDB directory to score directly.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "atr")]
    pub ann: String,
    #[arg(long, value_enum, default_value = "all")]
    pub partition: PartitionArg,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub band: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub partition: PartitionArg,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    2
                }
            };
        }
    };
    let command_line = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli, command_line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("\nFor more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}
