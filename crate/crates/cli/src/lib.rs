//! Command-line driver: JSON experiment configs in, CSV and JSON results out.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod output;
pub mod reproduce;

use output::{Metadata, Outputs};

#[derive(Debug, Parser)]
#[command(name = "noisepath", version, about = "Qubit dephasing under Gaussian noise")]
pub struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Omits the timestamp line so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    pub no_header_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Fig2b,
    Fig3,
    Fig4,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Dump the window correlation matrix.
    Correlate,
    /// Noise eigenmodes and spectrum.
    Modes,
    /// Decay curve of the configured control.
    Dephase,
    /// Monte Carlo coherence against the exact attenuation.
    Sample,
    /// Simulated spectroscopy and spectrum reconstruction.
    Reconstruct,
    /// Pulse-time search against CPMG, Uhrig and free evolution.
    Optimize,
    /// Markov propagator and Chapman–Kolmogorov check.
    Propagate,
    /// Built-in scenarios; no config needed.
    Reproduce { scenario: Scenario },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Acceptance(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Acceptance(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<noisepath::Error> for CliError {
    fn from(e: noisepath::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

/// What a command produced: files to write and, for `sample`, whether the
/// acceptance check failed (the report is still written).
#[derive(Debug, Default)]
pub struct Report {
    pub outputs: Outputs,
    pub failure: Option<String>,
}

/// Inputs shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub timestamp: Option<u64>,
}

impl Context {
    pub fn metadata(
        &self,
        command: &str,
        seed: Option<u64>,
        grid: Option<noisepath::TimeGrid>,
        tolerances: Vec<(&'static str, f64)>,
    ) -> Metadata {
        Metadata {
            command: command.into(),
            config_sha256: self.config_sha256.clone(),
            seed,
            grid,
            tolerances,
            timestamp: self.timestamp,
        }
    }

    /// The `--seed` override, else the config value.
    pub fn seed_or(&self, configured: u64) -> u64 {
        self.seed.unwrap_or(configured)
    }
}

/// Runs the command and writes its outputs.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Config("--threads: must be at least 1".into()));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let timestamp = if cli.no_header_timestamp {
        None
    } else {
        Some(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
    };
    let report = match &cli.command {
        Command::Reproduce { scenario } => reproduce::run(*scenario, cli.seed, timestamp)?,
        cmd => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::Config("--config: required by this command".into()))?;
            let text = std::fs::read(path)
                .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
            let text = String::from_utf8(text)
                .map_err(|_| CliError::Config(format!("{}: config is not UTF-8", path.display())))?;
            let cfg = config::parse(&text)?;
            let ctx = Context {
                seed: cli.seed,
                config_sha256: output::sha256_hex(text.as_bytes()),
                timestamp,
            };
            commands::run(cmd, &cfg, &ctx)?
        }
    };
    report
        .outputs
        .write_to(&cli.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", cli.out.display())))?;
    match report.failure {
        Some(msg) => Err(CliError::Acceptance(msg)),
        None => Ok(()),
    }
}
