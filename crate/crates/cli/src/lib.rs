//! The `bloodnet` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure during training.

use std::ffi::OsString;
use std::path::PathBuf;

use bloodnet::model::Variant;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod overlay;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bloodnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(bloodnet::Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: bloodnet::Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "bloodnet", version, about = "Hemorrhage detection on synthetic head CT phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic studies, one directory each.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        studies: usize,
        /// Index of the first study; ids and random streams follow it.
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        /// Overrides `phantom.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the staged training protocol and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Validation studies for per-epoch AUC and best-epoch selection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `arch.variant`.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long)]
        shuffle_seed: Option<u64>,
        /// Stage epochs as `s1,s2,s3`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        epochs: Option<Vec<usize>>,
    },
    /// Slice- and study-level ROC analysis of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `eval.n_bootstrap`.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Overrides `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print `<study id> <probability> <blood mm3>` for one study.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        study: PathBuf,
    },
    /// Compare checkpoints and draw mask overlays.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One per variant; repeat the flag.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
