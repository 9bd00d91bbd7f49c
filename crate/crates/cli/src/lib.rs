//! Experiment driver for `vdm-core`: configuration, the command
//! implementations and CSV/SVG output.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;
pub mod verify;

use std::path::PathBuf;

use anyhow::Result;

pub use commands::{execute, Incompatible};
pub use config::{Command, Config, RunConfig};
pub use output::RunManifest;

/// Loads the config, applies flag overrides and runs the command.
pub fn run(command: Command, config: &std::path::Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunManifest> {
    let values = Config::load(config)?;
    execute(&RunConfig::new(command, values, seed, out)?)
}
