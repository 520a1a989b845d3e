//! Experiment orchestration for the sequential MCMC filters: configuration,
//! synthetic truth and observations, replica runs, metrics and result files.

pub mod config;
pub mod convergence;
pub mod experiment;
pub mod metric;

pub use config::ExperimentConfig;
pub use experiment::{build_problem, run_experiment, run_filter, Problem, RunResult};
pub use metric::error_metric;
