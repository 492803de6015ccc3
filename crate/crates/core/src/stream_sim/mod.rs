//! Stream simulation: arrival model, baselines, configuration, experiment
//! driver and metrics reports.

pub mod arrival;
pub mod baselines;
pub mod config;
pub mod experiment;
pub mod report;

pub use config::StreamConfig;
pub use experiment::{run_all, run_experiment, run_experiment_with};
pub use report::{write_csv, write_json, MetricsReport, StageTimings};
