//! Experiment runner for steered diffusion: config handling, the six
//! commands, and their artifacts.
//!
//! Every command reads a flat `section.key = value` config, writes into one
//! output directory and finishes with a `manifest.txt` listing the config
//! hash, the code version and every emitted file.

pub mod analysis;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod setup;

pub use commands::{run, Command, RunSummary};
pub use config::Config;
pub use error::{CliError, CliResult};
