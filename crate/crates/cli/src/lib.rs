//! Experiment runner: reads a TOML config, runs one experiment and writes a
//! `report.json` plus CSV plot data into an output directory.

use std::path::{Path, PathBuf};

use dynrcm::stats::StatReport;

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind};
pub use runner::{run, RunOutcome};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "RCM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "rcm-out";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Bad config or parameters; nothing was computed.
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// The experiment ran but could not finish (solver, explosion, ...).
    #[error("run failed: {0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

impl From<dynrcm::Error> for RunError {
    fn from(e: dynrcm::Error) -> Self {
        match e {
            dynrcm::Error::Parameter(_) | dynrcm::Error::Range(_) => RunError::Config(e.to_string()),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub threads: Option<usize>,
    pub strict_sobolev: bool,
}

/// Reads and validates a config file; TOML errors carry line and column.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

/// `--out`, then the config's `output_dir`, then `$RCM_OUT_DIR`, then `rcm-out`.
pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Exit status of a finished run: 0 iff every check passed.
pub fn exit_status(report: &StatReport) -> i32 {
    if report.all_pass() {
        0
    } else {
        1
    }
}
