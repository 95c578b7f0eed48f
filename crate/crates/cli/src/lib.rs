//! Twin-experiment driver: configuration, truth generation, sampler runs
//! and diagnostics, all persisted as plain files under an output directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{diag, gen_truth, run, DiagArgs, GenTruthArgs, Method, RunArgs};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
