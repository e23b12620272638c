//! Synthetic localization benchmark: pose-error metrics, recall reports,
//! method sweeps, the continuous-update protocol, and file formats.

pub mod config;
pub mod experiment;
pub mod io;
pub mod metrics;

use duoloc_core::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub use config::{BenchConfig, Cell, Method};
pub use experiment::{run_continuous, run_sweep, Mode, QueryRecord, RecallReport, ReportRow, RunOutput};
pub use metrics::{pose_error, PoseError, Threshold, DEFAULT_THRESHOLDS};
