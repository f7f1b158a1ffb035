//! `swinchex`: end-to-end pipeline for the windowed-attention chest X-ray
//! classifier. Subcommands: split, train, eval, gradcam, complexity, check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swinchex_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "swinchex",
    about = "Multi-label chest X-ray classification with shifted-window attention",
    version
)]
struct Cli {
    /// Path to the run config (key = value with section headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set train.lr=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a patient-disjoint train/val manifest.
    Split,
    /// Train, checkpoint each epoch, and record the best-validation epoch.
    Train,
    /// Evaluate checkpoints on a split and write the per-pathology report.
    Eval {
        /// Checkpoint file (repeatable; one report column each).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Which side of the manifest to score.
        #[arg(long, default_value = "val")]
        split: String,
        /// Report CSV path (default: <output.dir>/report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saliency heatmap for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target pathology (canonical name or index); defaults to the
        /// dominant logit.
        #[arg(long)]
        class: Option<String>,
        /// Output PNG path (default: <output.dir>/gradcam_<class>.png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the attention-complexity CSV (formulas and measured counts).
    Complexity {
        /// Grid point as h,w,C,M (repeatable; a small default grid otherwise).
        #[arg(long = "point")]
        points: Vec<String>,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in gradient and oracle suites.
    Check,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Divisibility { .. } => 2,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::UndefinedAuc => 3,
        Error::NonFiniteLoss { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidTensor(_)
        | Error::NonScalarLoss(_) => 4,
        Error::CheckFailed(_) => 5,
    }
}

fn require_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    RunConfig::load(path, &cli.overrides)
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Split => commands::cmd_split(&require_config(cli)?),
        Command::Train => commands::cmd_train(&require_config(cli)?),
        Command::Eval {
            checkpoint,
            split,
            out,
        } => commands::cmd_eval(&require_config(cli)?, checkpoint, split, out.as_deref()),
        Command::Gradcam {
            checkpoint,
            image,
            class,
            out,
        } => commands::cmd_gradcam(
            &require_config(cli)?,
            checkpoint,
            image,
            class.as_deref(),
            out.as_deref(),
        ),
        Command::Complexity { points, out } => commands::cmd_complexity(points, out.as_deref()),
        Command::Check => commands::cmd_check(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
