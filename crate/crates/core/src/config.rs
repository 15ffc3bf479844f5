//! Model, training and decoding configuration, loadable from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CalecError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub max_positions: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub backbone_layers: usize,
    pub within_layers: usize,
    pub cross_layers: usize,
    pub modal_layers: usize,
    pub inferrer_layers: usize,
    /// One projection set reused by every refinement layer.
    pub share_refine: bool,
    pub decoder_layers: usize,
    pub num_classes: usize,
    pub bias: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 32,
            feature_dim: 16,
            max_positions: 48,
            heads: 1,
            ffn_mult: 4,
            backbone_layers: 2,
            within_layers: 3,
            cross_layers: 6,
            modal_layers: 3,
            inferrer_layers: 3,
            share_refine: false,
            decoder_layers: 2,
            num_classes: 3,
            bias: true,
            dropout: 0.0,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(CalecError::Config(m.to_string()));
        if self.hidden == 0 || self.vocab_size == 0 || self.feature_dim == 0 {
            return err("hidden, vocab_size and feature_dim must be positive");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return err("heads must divide hidden");
        }
        if self.inferrer_layers == 0 {
            return err("relation inferrer needs at least one refinement layer");
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive");
        }
        if self.dropout != 0.0 {
            return err("dropout is not supported; set dropout = 0");
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Initial rate for `csi.*` parameters during relation training.
    pub csi_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub linear_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            csi_lr: 1e-4,
            batch_size: 16,
            epochs: 50,
            patience: 5,
            linear_decay: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Rates used for fine-tuning pre-trained weights: 1e-5 base, 1e-6 for
    /// the interactor during relation training.
    pub fn finetune() -> Self {
        Self { lr: 1e-5, csi_lr: 1e-6, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub sample_size: usize,
    pub top_k: usize,
    pub max_len: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 5, sample_size: 5, top_k: 32, max_len: 12, lambda: 0.86, seed: 11 }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let err = |m: String| Err(CalecError::Config(m));
        if self.beam < 1 || self.sample_size < 1 {
            return err("beam and sample size must be at least 1".into());
        }
        if self.top_k < 1 || self.top_k > vocab_size {
            return err(format!("top_k must lie in 1..={vocab_size}"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return err("lambda must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pretrain: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub regions: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            train: 6000,
            val: 300,
            test: 300,
            regions: 4,
            feature_dim: 16,
            noise: 0.1,
            seed: 2024,
        }
    }
}

/// Top-level config file with one table per concern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CalecError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
