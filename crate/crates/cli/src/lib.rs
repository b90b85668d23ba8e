//! Command-line front end: experiment configs, training runs, ablation
//! grids, parameter reports, decoding and checkpoint averaging.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod report;
pub mod run;

pub use config::{EvalConfig, ExperimentConfig};
pub use error::{CliError, Result};
