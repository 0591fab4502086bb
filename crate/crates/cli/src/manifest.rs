use std::path::{Path, PathBuf};

use agma::nets::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration; passing this file back as `--config` reruns the command.
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, threads: usize) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            seed: config.train.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    /// `<command>.manifest.json`, so commands sharing an output directory keep separate records.
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).map_err(agma::Error::from)?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
