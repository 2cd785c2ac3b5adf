//! `peneo`: train, evaluate and inspect key-value pair extractors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use peneo_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Pipeline {
    /// The joint line-level decoder.
    Peneo,
    /// Entity tagging followed by entity-level relation classification.
    Serre,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Peneo => "peneo",
            Pipeline::Serre => "serre",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "peneo", version, about = "Key-value pair extraction from form documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model family; commands reading a model default to the one it was trained as.
    #[arg(long, global = true, value_enum)]
    pub pipeline: Option<Pipeline>,
    /// Worker threads for document-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: `peneo-out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and save the best-by-validation checkpoint.
    Train {
        /// Training dataset (overrides `train_data`).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation dataset (overrides `val_data`).
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Score a model on a labelled dataset.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluation dataset (overrides `test_data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the gold relation matrices instead of a model.
        #[arg(long)]
        gold: bool,
        /// Entity predictions to link instead of the model's own tagging (serre only).
        #[arg(long)]
        ser: Option<PathBuf>,
    },
    /// Extract key-value pairs with a trained model.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Corrupt gold entities and measure the fixed relation head (serre only).
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Split entity-level annotations into OCR lines.
    Relabel {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic form corpus.
    Synth {
        /// Number of documents (overrides `synth_docs`).
        #[arg(long)]
        docs: Option<usize>,
    },
    /// Check analytic gradients of the whole pipeline against finite differences.
    Gradcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Parse { .. } => "parse",
            Command::Perturb { .. } => "perturb",
            Command::Relabel { .. } => "relabel",
            Command::Synth { .. } => "synth",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Why a run failed; each variant has its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Config(_)) => 1,
            Failure::Core(Error::Numeric(_) | Error::Shape(_)) | Failure::Numeric(_) => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
