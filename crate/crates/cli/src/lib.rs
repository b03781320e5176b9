//! Experiment runner for `calibratemix`: TOML configs in, metric and
//! reliability CSVs out.

pub mod arms;
pub mod config;
pub mod error;
pub mod runner;

pub use error::{CliError, Result};
