//! Experiment orchestration: configs, runs, metrics, output files and
//! diagnostics.

use std::path::PathBuf;

use thiserror::Error;

use crate::env::{Algorithm, EnvError};
use crate::gnn::GnnError;
use crate::graph::GraphError;
use crate::linalg::LinalgError;
use crate::tangent::KernelError;

pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod metrics;
pub mod output;
pub mod plot;

pub use config::{parse_config, parse_config_str, ExperimentConfig, ValidationError};
pub use experiment::{run_experiment, ExperimentResult};
pub use metrics::{relative_regret, top_rate, SummaryRow, SummaryTable};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {}: {message}", if path.as_os_str().is_empty() { "config".into() } else { path.display().to_string() })]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Validation(#[from] ValidationError),

    #[error("run failed (environment {env}, {algorithm}, repetition {rep}): {source}")]
    Run {
        env: String,
        algorithm: Algorithm,
        rep: u64,
        #[source]
        source: EnvError,
    },

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Gnn(#[from] GnnError),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("no results to aggregate")]
    EmptyResults,

    #[error("top rate needs at least two algorithms, got {0}")]
    FewerThanTwoAlgorithms(usize),

    #[error("malformed results: {0}")]
    Malformed(String),

    #[error("thread pool: {0}")]
    Pool(String),
}

impl HarnessError {
    /// True for problems with the user's input rather than with execution.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Parse { .. } | HarnessError::Validation(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
