//! Run configuration: a TOML file overridden by command-line flags. The
//! effective configuration is echoed into every run directory.

use std::fs;
use std::path::Path;

use bitemporal_core::dataset::GeneratorConfig;
use bitemporal_core::model::ModelConfig;
use bitemporal_core::trainer::TrainConfig;
use bitemporal_core::vocab::DEFAULT_MIN_FREQ;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, IoResult};

pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Model dimensions; image size and vocabulary size come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub hsa_layers: usize,
    pub ffn_dim: usize,
    pub uni_layers: usize,
    pub multi_layers: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
    pub min_freq: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            backbone_channels: m.backbone_channels,
            d_model: m.d_model,
            heads: m.heads,
            hsa_layers: m.hsa_layers,
            ffn_dim: m.ffn_dim,
            uni_layers: m.uni_layers,
            multi_layers: m.multi_layers,
            max_len: m.max_len,
            tie_embeddings: m.tie_embeddings,
            min_freq: DEFAULT_MIN_FREQ,
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(&self, image_size: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            backbone_channels: self.backbone_channels.clone(),
            d_model: self.d_model,
            heads: self.heads,
            hsa_layers: self.hsa_layers,
            ffn_dim: self.ffn_dim,
            uni_layers: self.uni_layers,
            multi_layers: self.multi_layers,
            max_len: self.max_len,
            vocab_size,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

/// A parsed config file together with whether it set `train.loss.theta`.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub theta_set: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> IoResult<LoadedConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| IoError::format(path, e.to_string()))?;
        let theta_set = table
            .get("train")
            .and_then(|t| t.get("loss"))
            .and_then(|l| l.get("theta"))
            .is_some();
        let config: RunConfig = toml::from_str(text).map_err(|e| IoError::format(path, e.to_string()))?;
        Ok(LoadedConfig { config, theta_set })
    }

    pub fn load(path: &Path) -> IoResult<LoadedConfig> {
        let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    pub fn echo(&self, run_dir: &Path) -> IoResult<()> {
        let path = run_dir.join(CONFIG_ECHO_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| IoError::file(&path, e))
    }
}
