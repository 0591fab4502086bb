use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "agma-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    decay: bool,
    value: Tensor,
}

/// Serialisable snapshot of a model configuration and all its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub model: ModelConfig,
    /// Free-form metadata such as the training configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
    params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn capture(cfg: &ModelConfig, store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .ids()
            .map(|id| NamedParam {
                name: store.name(id).to_string(),
                decay: store.decays(id),
                value: store.value(id).clone(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: cfg.clone(),
            meta,
            params,
        }
    }

    /// Rebuilds the parameter store and binds a model to it.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            if store.id(&p.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
            if p.value.len() != p.value.rows() * p.value.cols() {
                return Err(Error::Checkpoint(format!("corrupt tensor {}", p.name)));
            }
            store.add(&p.name, p.value.clone(), p.decay);
        }
        let model = Model::bind(self.model.clone(), &store)?;
        Ok((model, store))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}
