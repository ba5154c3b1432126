//! `r2d2`: one pipeline stage per invocation.
//!
//! Every stage writes its outputs plus a JSON manifest holding the resolved
//! configuration, seeds and SHA-256 checksums of inputs and outputs. Settings
//! resolve as flag > config file > built-in default; `--config` also accepts
//! a previous manifest. Usage errors exit with 2, stage failures with 1 and a
//! single JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod layers;
mod manifest;
mod stages;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] r2d2::corpus::CorpusError),
    #[error(transparent)]
    Entity(#[from] r2d2::entities::EntityError),
    #[error(transparent)]
    Perturb(#[from] r2d2::perturb::PerturbError),
    #[error(transparent)]
    Model(#[from] r2d2::model::ModelError),
    #[error(transparent)]
    Train(#[from] r2d2::trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] r2d2::eval::EvalError),
    #[error(transparent)]
    Contamination(#[from] r2d2::contamination::ContaminationError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Corpus(_) => "corpus",
            CliError::Entity(_) => "entities",
            CliError::Perturb(_) => "perturb",
            CliError::Model(_) => "model",
            CliError::Train(_) => "trainer",
            CliError::Eval(_) => "eval",
            CliError::Contamination(_) => "contamination",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "r2d2",
    version,
    about = "Faithful table-to-text training and evaluation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage.
#[derive(Debug, Args)]
struct Common {
    /// TOML config file, or a previous run manifest (.json) to replay.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Where to write the run manifest [default: <primary output>.manifest.json].
    #[arg(long, value_name = "FILE", env = "R2D2_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Run single-threaded; outputs are identical either way.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic table-to-text corpus.
    Synth(stages::SynthArgs),
    /// Build contradictory sentences by entity replacement.
    Perturb(stages::PerturbArgs),
    /// Likelihood-only fine-tuning from scratch.
    TrainWarmup(stages::WarmupArgs),
    /// Replacement-detection and unlikelihood fine-tuning from a warmup checkpoint.
    TrainR2d2(stages::R2d2Args),
    /// Score predictions (or a checkpoint's generations) with NER metrics and BLEU.
    Evaluate(stages::EvaluateArgs),
    /// Run the metric reliability test on contaminated reference sets.
    Contaminate(stages::ContaminateArgs),
    /// Collect evaluation reports into one table plus scatter data.
    Report(stages::ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Perturb(_) => "perturb",
            Command::TrainWarmup(_) => "train-warmup",
            Command::TrainR2d2(_) => "train-r2d2",
            Command::Evaluate(_) => "evaluate",
            Command::Contaminate(_) => "contaminate",
            Command::Report(_) => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.name();
    let result = match cli.command {
        Command::Synth(a) => stages::synth(a),
        Command::Perturb(a) => stages::perturb(a),
        Command::TrainWarmup(a) => stages::train_warmup(a),
        Command::TrainR2d2(a) => stages::train_r2d2(a),
        Command::Evaluate(a) => stages::evaluate(a),
        Command::Contaminate(a) => stages::contaminate(a),
        Command::Report(a) => stages::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "stage": stage,
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
