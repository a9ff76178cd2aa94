//! End-to-end runs, benchmark suites and their metrics.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod suite;
pub mod taskfile;

use thiserror::Error;

use crate::sampling::SamplingError;

pub use config::{Config, PhaseSettings, Stages};
pub use metrics::{mean_std, r2};
pub use pipeline::{run_pipeline, run_pipeline_with, Outcome, RunMetrics, RunReport, Sparsity, Stage, StageRecord, StageStatus, CANONICAL_STAGES};
pub use suite::{run_suite, run_tasks, SuiteOptions, SuiteSummary, TaskSummary};
pub use taskfile::{desk_suite, load_suite, parse_suite};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("suite: {0}")]
    Suite(String),
    #[error("suite has no tasks")]
    EmptySuite,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
