//! File formats, dataset IO, configuration and experiment drivers for the
//! pair-matching engine in `ppmn-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod netpbm;
pub mod parallel;
pub mod reports;

pub use error::{exit_code, CliError};
