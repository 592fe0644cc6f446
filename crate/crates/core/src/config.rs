//! File-backed run configuration shared by the command-line entry points.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            pretrain: TrainConfig::pretrain_defaults(),
            finetune: TrainConfig::finetune_defaults(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON document; unknown
    /// keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
