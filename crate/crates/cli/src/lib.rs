//! Pipeline behind the `gtl-forge` command: corpus building, training,
//! evaluation, sweeps and report emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, Result};
