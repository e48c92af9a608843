//! The `rfpnapo` command-line driver.
//!
//! Each subcommand reads a flat run config, does one pipeline stage and
//! writes its artifact next to a `<out>.manifest.json` recording inputs,
//! outputs and their hashes. Exit codes: 0 success, 1 failed verification
//! or runtime error, 2 configuration, 3 missing input, 4 shape or
//! consistency, 5 parse.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rfpnapo_core::Error;

pub mod commands;
pub mod manifest;
pub mod verify;

#[derive(Debug, Parser)]
#[command(
    name = "rfpnapo",
    version,
    about = "Prior-noise-aware preference alignment for toy rectified flows"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference model on the configured toy mixture.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate noise-tracked preference pairs from a reference checkpoint.
    GenPairs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align a copy of the reference model on a preference dataset.
    Align {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "pnapo")]
        method: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reward statistics for a model, and its paired win rate against another.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        against: Option<PathBuf>,
        /// Samples per condition; overrides `eval.n`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a built-in verification suite: gradcheck, kl, variance or schedule.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter, deduplicate and cluster-resample a prompt corpus TSV.
    Corpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "input", alias = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn missing(path: &std::path::Path) -> Self {
        CliError::new(3, format!("missing input: {}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
            Error::Shape { .. } | Error::Data(_) => 4,
            Error::Parse { .. } => 5,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (exit {})", self.message, self.code)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Sizes the global worker pool from `RFPNAPO_THREADS`, if set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("RFPNAPO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
        CliError::new(
            2,
            format!("RFPNAPO_THREADS must be a positive integer, got {raw:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(1, format!("cannot size thread pool: {e}")))
}

/// Runs one subcommand; `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: &[String]) -> CliResult<u8> {
    match &cli.command {
        Command::Pretrain { config, out } => commands::pretrain(config, out, argv),
        Command::GenPairs {
            config,
            model,
            n,
            out,
        } => commands::gen_pairs(config, model, *n, out, argv),
        Command::Align {
            config,
            method,
            model,
            pairs,
            out,
        } => commands::align(config, method, model, pairs, out, argv),
        Command::Eval {
            config,
            model,
            against,
            n,
            out,
        } => commands::eval(config, model, against.as_deref(), *n, out, argv),
        Command::Verify { suite, out } => commands::verify(suite, out.as_deref(), argv),
        Command::Corpus { config, input, out } => commands::corpus(config, input, out, argv),
    }
}
