//! Command-line driver: configuration, experiment dispatch, CSV and SVG
//! output.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! failures. Errors are also printed to stderr as one JSON object.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod config;
pub mod plot;
pub mod report;
pub mod run;

use config::{Experiment, Fidelity, Overrides};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<estfuse::Error> for CliError {
    fn from(e: estfuse::Error) -> Self {
        match e {
            estfuse::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

/// Machine-readable error line written to stderr.
pub fn error_record(e: &CliError) -> String {
    serde_json::to_string(&ErrorRecord { error: e.kind(), exit_code: e.exit_code(), message: e.to_string() })
        .expect("error record serializes")
}

#[derive(Debug, Parser)]
#[command(name = "estfuse", version, about = "Monte Carlo studies of bias-variance combinations of two estimators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Relative-MSE curve over the bias grid for one Gaussian scenario.
    GaussianCurve(Common),
    /// Summaries over the Gaussian parameter grid.
    GaussianGrid(Common),
    /// Trial plus confounded observational study, swept over confounding strength.
    Sprint(Common),
    /// Known-moment MSE against the worst-case bound.
    BoundCheck(Common),
    /// Weight consistency and the large-bias limit.
    Consistency(Common),
    /// Simulated significance-level table of the test-then-pool rule.
    CutoffTable(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "ESTFUSE_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    fidelity: Option<Fidelity>,
}

fn split(cmd: Cmd) -> (Experiment, Common) {
    match cmd {
        Cmd::GaussianCurve(c) => (Experiment::GaussianCurve, c),
        Cmd::GaussianGrid(c) => (Experiment::GaussianGrid, c),
        Cmd::Sprint(c) => (Experiment::Sprint, c),
        Cmd::BoundCheck(c) => (Experiment::BoundCheck, c),
        Cmd::Consistency(c) => (Experiment::Consistency, c),
        Cmd::CutoffTable(c) => (Experiment::CutoffTable, c),
    }
}

fn run_cli(cmd: Cmd) -> Result<Vec<report::FileEntry>, CliError> {
    let (experiment, c) = split(cmd);
    let raw = match &c.config {
        Some(p) => config::load_raw(p)?,
        None => config::RawConfig::default(),
    };
    let o = Overrides {
        experiment: Some(experiment),
        seed: c.seed,
        reps: c.reps,
        workers: c.workers,
        out: c.out,
        fidelity: c.fidelity,
    };
    let cfg = config::resolve(raw, &o)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| run::execute(&cfg))
}

/// Parses arguments, runs, and returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", error_record(&CliError::Config(e.kind().to_string())));
            }
            return code;
        }
    };
    match run_cli(cli.cmd) {
        Ok(files) => {
            for f in files {
                println!("{}\t{}\t{}", f.name, f.schema, f.rows);
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            e.exit_code()
        }
    }
}
