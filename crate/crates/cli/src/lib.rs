//! The `exolam` experiment runner: JSON configs, seeded sweeps over a worker
//! pool, a CSV results store, oracle verification and trend reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod store;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, GridExperiment, LinearExperiment};
pub use error::{exit, CliError};
