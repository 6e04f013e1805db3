//! Experiment runner behind the `eki` binary: configuration, the registered
//! experiments and their CSV/JSON output.

mod config;
mod experiments;
mod output;

use std::fs;
use std::path::Path;

pub use config::{
    parse_config, parse_config_str, serialize_config, ConfigError, ExperimentConfig, ExperimentKind, FlowSpec,
    GridSpec, ProblemSpec, SimSpec,
};
pub use experiments::loglog_slope;
pub use output::{Summary, Table};

use crate::error::EkiError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("computation failed: {0}")]
    Compute(#[from] EkiError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.into())
    }
}

impl HarnessError {
    /// Machine-readable form for standard error.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            HarnessError::Config(e) => serde_json::json!({"error": "config", "key": e.key, "message": e.message}),
            HarnessError::Compute(e) => serde_json::json!({"error": "compute", "message": e.to_string()}),
            HarnessError::Io(e) => serde_json::json!({"error": "io", "message": e.to_string()}),
        }
    }
}

/// Run the configured experiment, writing its files and `summary.json` into
/// `out_dir`. The summary reports every check; `passed` is their conjunction.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary, HarnessError> {
    let setup = cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut summary = Summary::new(cfg.experiment.name(), cfg.seed);
    let mut run = experiments::Run { cfg, setup: &setup, dir: out_dir, summary: &mut summary };
    experiments::dispatch(&mut run)?;
    summary.files.push("summary.json".into());
    summary.write(&out_dir.join("summary.json"))?;
    Ok(summary)
}
