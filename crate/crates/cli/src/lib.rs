//! Experiment orchestration for the spinamp solvers: configs, reports and the
//! pipelines behind each subcommand.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod tolerances;
pub mod validate;

pub use config::{ExperimentConfig, SpecSource};
pub use error::{CliError, Result};
pub use report::{Check, Comparison, RunReport, Status};
pub use tolerances::Tolerances;
pub use validate::validate_se;
