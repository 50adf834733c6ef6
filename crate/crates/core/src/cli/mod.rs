//! Command-line entry point: argument parsing, dispatch, run manifests.

mod commands;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use output::{fmt_num, round_sig, OutputDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;
pub const THREADS_ENV: &str = "CAVITY_ARRAY_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_COMPUTE,
        }
    }
}

macro_rules! compute_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Compute(e.to_string())
            }
        }
    )*};
}

compute_errors!(
    crate::prescription::PrescriptionError,
    crate::paraxial::ParaxialError,
    crate::budget::BudgetError,
    crate::hologram::HologramError,
    crate::atomsim::AtomSimError,
    crate::analysis::AnalysisError
);

#[derive(Debug, Parser)]
#[command(name = "cavity-array", version, about = "Cavity array microscope workbench")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Directory receiving all outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed for stochastic subcommands; a random seed is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace one ray through successive round trips.
    Trace(commands::TraceArgs),
    /// Round-trip survival of zero-slope rays over a launch grid.
    ScanMap(commands::ScanMapArgs),
    /// Paraxial stability scan of element displacements.
    Stability(commands::StabilityArgs),
    /// Loss, outcoupling and collection budget report.
    Budget(commands::BudgetArgs),
    /// Mode capacity and per-cavity detuning sensitivity.
    Degeneracy(commands::DegeneracyArgs),
    /// Phase-mask synthesis with weighted Gerchberg-Saxton homogenization.
    Hologram(commands::HologramArgs),
    /// Synthetic experimental data.
    #[command(subcommand)]
    Simulate(commands::SimulateCommand),
    /// Statistical analysis of measured or simulated data.
    #[command(subcommand)]
    Analyze(commands::AnalyzeCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Trace(_) => "trace",
            Command::ScanMap(_) => "scan-map",
            Command::Stability(_) => "stability",
            Command::Budget(_) => "budget",
            Command::Degeneracy(_) => "degeneracy",
            Command::Hologram(_) => "hologram",
            Command::Simulate(_) => "simulate",
            Command::Analyze(_) => "analyze",
        }
    }

    fn stochastic(&self) -> bool {
        matches!(self, Command::Budget(_) | Command::Simulate(_))
    }
}

/// Record of one run; identical manifests imply identical outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run a parsed command and return its manifest.
pub fn execute(cli: Cli) -> Result<RunManifest, CliError> {
    let threads = cli.common.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let seed = cli.command.stochastic().then(|| cli.common.seed.unwrap_or_else(rand::random));
    let mut out = OutputDir::create(&cli.common.out)?;
    let name = cli.command.name();
    let config = pool.install(|| commands::dispatch(&cli.command, seed.unwrap_or(0), &mut out))?;
    let manifest = RunManifest {
        subcommand: name.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        outputs: out.files().to_vec(),
    };
    let value = output::to_json(&manifest)?;
    out.write_json(MANIFEST_FILE, &value)?;
    Ok(manifest)
}
