//! Scoring and scripted toy-scale experiments.

pub mod experiments;
pub mod metrics;

pub use experiments::{run_experiment, ExperimentReport, Membership, ReportRow, ValueKind, EXPERIMENTS};
pub use metrics::{accuracy, overall, params_accuracy, MetricSet};
