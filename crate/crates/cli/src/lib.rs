//! Command-line front end: configuration, run directories and stage
//! orchestration on top of `lot-core`.

pub mod cli;
pub mod config;
pub mod demo;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::Config;
pub use error::{CliError, CliResult};
pub use manifest::{RunManifest, Stage};
pub use pipeline::{Run, RunOptions, StageOutcome};
