//! Command-line companion to `socprob-core`: file formats, checkpoints,
//! dataset loading, and the orchestration behind the `socprob` binary.

mod app;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalpar;
pub mod export;
pub mod fsutil;
pub mod gradcheck;
pub mod manifest;

pub use app::run;
pub use error::{CliError, Result};
