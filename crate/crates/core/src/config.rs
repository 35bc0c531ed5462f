//! Run configuration file (TOML).
//!
//! ```toml
//! [dataset]
//! patients = 30
//! seed = 7
//!
//! [model]
//! embed_dim = 64
//!
//! [train]
//! epochs = 30
//! lr_decay_epochs = [20, 25]
//!
//! [embedding]
//! dim = 64
//! ```
//!
//! Missing tables and keys take the desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            dataset: DatasetConfig::default(),
            embedding: EmbeddingConfig {
                dim: model.embed_dim,
                ..EmbeddingConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                lr_decay_epochs: vec![20, 25],
                ..TrainConfig::default()
            },
            model,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.embedding.dim != self.model.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "embedding dim {} differs from model embed_dim {}",
                self.embedding.dim, self.model.embed_dim
            )));
        }
        if (self.dataset.height, self.dataset.width) != (self.model.input_height, self.model.input_width) {
            return Err(Error::InvalidConfig(format!(
                "dataset slices {}x{} differ from model input {}x{}",
                self.dataset.height, self.dataset.width, self.model.input_height, self.model.input_width
            )));
        }
        Ok(())
    }
}
