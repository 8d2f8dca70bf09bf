//! Experiment harness: specs, runners, reports and plots.

pub mod config;
pub mod error;
pub mod experiments;
pub mod plot;
pub mod report;

pub use config::{ExperimentName, ExperimentSpec};
pub use error::BenchError;
pub use report::Report;
