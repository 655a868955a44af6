//! Experiment runner: dataset generation, training runs over methods and
//! seeds, checkpoint evaluation and report aggregation.

pub mod commands;
pub mod config;

pub use commands::{eval, generate, report, run, Evaluation, GenerateSummary, RunOutcome};
pub use config::{ExperimentConfig, TargetPool, Variant, SCHEMA_VERSION};
