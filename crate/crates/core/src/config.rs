//! Declarative run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::backbones::{Arch, EncoderConfig};
use crate::error::{Error, Result};
use crate::finetune_eval::FinetuneConfig;
use crate::nn::AdamConfig;
use crate::pretrain::{LossConfig, Method, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Resample each dataset to its median length and z-normalize.
    pub preprocess: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { preprocess: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub optimizer: AdamConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            batch_size: p.batch_size,
            epochs: p.epochs,
            steps_per_epoch: p.steps_per_epoch,
            optimizer: p.optimizer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.encoder.validate()?;
        if self.finetune.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Short SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_json()).expect("config serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }

    /// Pre-training config for one (method, backbone) pair.
    pub fn pretrain_config(&self, method: Method, arch: Arch) -> Result<PretrainConfig> {
        let encoder = EncoderConfig {
            arch,
            ..self.encoder.clone()
        };
        let mut cfg = PretrainConfig::for_method(method, encoder);
        cfg.batch_size = self.pretrain.batch_size;
        cfg.epochs = self.pretrain.epochs;
        cfg.steps_per_epoch = self.pretrain.steps_per_epoch;
        cfg.optimizer = self.pretrain.optimizer;
        cfg.loss = self.loss.clone();
        cfg.augment = self.augment.clone();
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}
