//! Run configuration read from TOML with `[model]`, `[train]`, `[sampler]`
//! and `[data]` sections. Missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    /// Seed of the held-out split.
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 4096,
            val_count: 512,
            seed: 0,
            val_seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return arg("dataset sizes must be positive");
        }
        if self.data.seed == self.data.val_seed {
            return arg("train and validation seeds must differ");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
