//! Configuration, the training loop and run artifacts.

mod config;
mod output;
pub mod selfcheck;
mod train;

use crate::alpha_solver::AlphaError;
use crate::data::DataError;
use crate::models::ModelError;
use crate::optimizer::OptimError;
use crate::risks::RiskError;
use crate::theory::TheoryError;

pub use config::{AlphaRisks, ConfigError, DataSpec, ExperimentConfig, Mode};
pub use output::{read_metrics_csv, write_outputs, MetricsRow, ALPHA_FILE, BOUND_FILE, LEDGER_FILE, METRICS_FILE};
pub use train::{architecture, bound_from_outputs, evaluate, load_dataset, run, run_on, EpochMetrics, RunOutcome, StepRecord};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("epoch {epoch}, step {step}: {message}")]
    Numeric { epoch: usize, step: usize, message: String },
    #[error(transparent)]
    Alpha(#[from] AlphaError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} not found; a bound needs the ledger of a run with sigma > 0")]
    MissingLedger { path: String },
}

impl RunError {
    /// Process exit code: 2 for bad input or configuration, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) | RunError::Io { .. } | RunError::MissingLedger { .. } => 2,
            RunError::Alpha(AlphaError::NoiselessLedger | AlphaError::Constant(_)) => 2,
            _ => 3,
        }
    }
}
