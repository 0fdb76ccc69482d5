//! Command-line runner: each command reads a flat JSON config, writes its
//! outputs under `<paths.out>/<command>-<hash8>-s<seed>/` and exits with
//! 0 (success), 1 (invalid config or input) or 2 (runtime failure).

pub mod commands;
pub mod config;
mod data;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Resolved, RunConfig};

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub(crate) fn invalid(msg: impl fmt::Display) -> Failure {
    Failure {
        code: EXIT_INVALID,
        error: anyhow::anyhow!("{msg}"),
    }
}

/// Attaches an exit code to any error.
pub(crate) trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: EXIT_INVALID,
            error: e.into(),
        })
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
    }
}

/// Bad inputs are validation errors; failures while training or reading a
/// checkpoint are runtime errors.
impl From<esci_core::Error> for Failure {
    fn from(e: esci_core::Error) -> Self {
        use esci_core::Error as E;
        let code = match e {
            E::Config(_) | E::Parse { .. } | E::Data(_) | E::Io { .. } => EXIT_INVALID,
            E::NonFinite { .. } | E::Checkpoint { .. } | E::Shape(_) | E::Index { .. } | E::Usage(_) => {
                EXIT_RUNTIME
            }
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "esci", version, about = "Query/product relevance training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Flat JSON config file with dotted keys.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress progress lines on stderr.
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic catalogue and labeled examples.
    Synth(Common),
    /// Build token, brand and color vocabularies from the catalogue.
    BuildVocab(Common),
    /// Multitask pre-training on the catalogue.
    Pretrain(Common),
    /// Fine-tune on labeled examples.
    Finetune(Common),
    /// Find and remove likely label errors with out-of-fold predictions.
    Clean(Common),
    /// Class predictions (task2/task3) or scores (task1) for examples.
    Predict(Common),
    /// Ensemble-mean ranking per query from one or more checkpoints.
    Rank(Common),
    /// Score predictions against gold labels.
    Evaluate(Common),
    /// Accumulating ablation over pre-training tasks or strategies.
    Ablate(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::BuildVocab(_) => "build-vocab",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Clean(_) => "clean",
            Command::Predict(_) => "predict",
            Command::Rank(_) => "rank",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::BuildVocab(c)
            | Command::Pretrain(c)
            | Command::Finetune(c)
            | Command::Clean(c)
            | Command::Predict(c)
            | Command::Rank(c)
            | Command::Evaluate(c)
            | Command::Ablate(c) => c,
        }
    }
}

/// Runs one command and returns the run directory.
pub fn execute(cli: &Cli) -> Outcome<PathBuf> {
    let common = cli.command.common();
    let resolved = Resolved::load(common.config.as_deref(), &common.overrides).invalid()?;
    commands::run(cli.command.name(), &resolved, common.quiet)
}

/// Entry point shared by the binary and tests: prints the run directory on
/// success and the error on failure, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
