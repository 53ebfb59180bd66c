//! Batch front end: reads a TOML run configuration, runs one experiment and
//! writes its CSV and JSON artifacts atomically.

pub mod config;
pub mod experiments;
pub mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

pub use config::{Experiment, Overrides, RunConfig};
use output::Artifact;

/// Everything that can stop a run, with its exit status and error record.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    UnknownModel(String),
    Solver(mfc_core::Error),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "invalid configuration: {m}"),
            Self::UnknownModel(m) => write!(
                f,
                "unknown model '{m}' (expected one of {})",
                config::MODEL_NAMES.join(", ")
            ),
            Self::Solver(e) => write!(f, "{e}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Failure {}

impl From<mfc_core::Error> for Failure {
    fn from(e: mfc_core::Error) -> Self {
        Self::Solver(e)
    }
}

impl Failure {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::UnknownModel(_) => "unknown_model",
            Self::Solver(mfc_core::Error::NonConvergence { .. }) => "non_convergence",
            Self::Solver(_) => "solver",
            Self::Io { .. } => "io",
        }
    }

    /// 2 for problems with the input, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::UnknownModel(_) => 2,
            Self::Solver(_) | Self::Io { .. } => 1,
        }
    }

    pub fn record(&self) -> Value {
        let details = match self {
            Self::Solver(mfc_core::Error::NonConvergence {
                gamma,
                min_step,
                trace,
            }) => {
                json!({ "gamma": gamma, "min_step": min_step, "residual_trace": trace })
            }
            _ => Value::Null,
        };
        json!({
            "status": "error",
            "kind": self.kind(),
            "message": self.to_string(),
            "details": details,
        })
    }
}

pub fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |source| Failure::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and resolves the configuration file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_failure(path))?;
    RunConfig::from_toml(&text, overrides)
}

/// Result of a finished run.
#[derive(Debug)]
pub struct Report {
    pub text: String,
    pub files: Vec<PathBuf>,
}

/// Runs the configured experiment and writes `summary.json`, `summary.txt`
/// and the experiment's CSV files into the output directory.
pub fn run(cfg: &RunConfig) -> Result<Report, Failure> {
    let start = Instant::now();
    let outcome = experiments::run(cfg)?;
    let config_json = serde_json::to_value(cfg).expect("configuration serializes");
    let summary = json!({
        "status": "ok",
        "experiment": cfg.experiment.name(),
        "model": cfg.model.name(),
        "seed": cfg.seed,
        "config": config_json,
        "results": outcome.results,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    let mut artifacts: Vec<Artifact> = outcome
        .tables
        .into_iter()
        .map(|(name, table)| Artifact::new(name, table.finish(cfg)))
        .collect();
    let mut pretty = serde_json::to_string_pretty(&summary).expect("summary serializes");
    pretty.push('\n');
    artifacts.push(Artifact::new("summary.json", pretty.into_bytes()));
    artifacts.push(Artifact::new(
        "summary.txt",
        outcome.text.clone().into_bytes(),
    ));
    let files = output::write_atomic(&cfg.out, &artifacts)?;
    Ok(Report {
        text: outcome.text,
        files,
    })
}
