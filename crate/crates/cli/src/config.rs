//! Run configuration: one file covering every subcommand.

use std::fs;
use std::path::Path;

use agma::train::TrainConfig;
use agma::traj::{IngestOptions, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frame id increment between consecutive positions in trajectory files.
    pub frame_step: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { frame_step: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples drawn per agent.
    pub n_samples: usize,
    /// Additional prefix sizes reported alongside `n_samples`.
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 20,
            ks: vec![1, 5, 10, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub sweep_size: usize,
    pub seed: u64,
    /// Use the true prior and sampler as the learned ones.
    pub matched: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            sweep_size: 100_000,
            seed: 0,
            matched: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Scene overlays emitted at most.
    pub max_scenes: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { max_scenes: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
    pub plot: PlotConfig,
}

impl RunConfig {
    /// Reads TOML, JSON, or the `config` field of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let inner = match value.get("config") {
                Some(c) if value.get("command").is_some() => c.clone(),
                _ => value,
            };
            serde_json::from_value(inner).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.train.model.seed = seed;
        self.theory.seed = seed;
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            window: self.train.model.window(),
            frame_step: self.data.frame_step,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.data.frame_step <= 0 {
            return Err(CliError::Config("data.frame_step must be positive".into()));
        }
        if self.eval.n_samples == 0 || self.eval.ks.contains(&0) {
            return Err(CliError::Config("eval sample counts must be positive".into()));
        }
        Ok(())
    }
}
