//! The `dfvt` command-line driver: synthetic data generation, training,
//! incremental fine-tuning, evaluation, fusion and gradient checking.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::execute;

/// Exit status of a usage or configuration error.
pub const EXIT_USAGE: u8 = 1;
/// Exit status of an unreadable, malformed or incompatible input.
pub const EXIT_DATA: u8 = 2;
/// Exit status of a failed verification.
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "dfvt", version, about = "Dual-stream video transformer for face forgery detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task as a manifest plus PPM frames.
    GenData(GenDataArgs),
    /// Train a model from its seeded initialization.
    Train(TrainArgs),
    /// Fine-tune an anchor checkpoint on new data with the anchor penalty.
    Finetune(FinetuneArgs),
    /// Score a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Average the predictions of two checkpoints and report metrics.
    Fuse(FuseArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Run config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// spatial, stream or flicker (default: data.task).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of videos.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory; receives manifest.tsv and frames/.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Manifest file, or a directory containing manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint used as both the starting weights and the penalty target.
    #[arg(long)]
    pub anchor: PathBuf,
    /// Anchor penalty weight (default: train.anchor_weight).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Frames per scored window (default: the largest model frame count).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Config whose `model.seed` is the default seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Route one check through a deliberately wrong gradient rule.
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_USAGE, anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<dfvt_core::Error> for Failure {
    fn from(e: dfvt_core::Error) -> Self {
        use dfvt_core::Error as E;
        let code = match e {
            E::Config(_) => EXIT_USAGE,
            E::Gradient(_) => EXIT_VERIFY,
            _ => EXIT_DATA,
        };
        Self::new(code, e)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Output goes to `out`; `--help` and `--version` succeed.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command, out),
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            Ok(())
        }
        Err(e) => {
            let msg = e.render().to_string();
            Err(Failure::usage(msg.trim_end().trim_start_matches("error: ")))
        }
    }
}
