//! Run configuration: one serializable struct covering data generation,
//! model shape, training, and evaluation. Every field has a default, and
//! every section is `#[serde(default)]`, so a config file only needs to
//! name the fields it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::EvalConfig;
use crate::meanflow::LossKind;
use crate::synthworld::GenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Network shape shared by the flow decoder and the fusion head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width of every attention block.
    pub width: usize,
    /// Number of cross-attention blocks in the decoder.
    pub depth: usize,
    /// Attention heads per block; must divide `width`.
    pub heads: usize,
    /// Mixture components in the noise prior == proposals per scene.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 2,
            heads: 4,
            k: 8,
        }
    }
}

/// Optimization schedule and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-decayed to zero after a linear warmup.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Probability that a drawn time pair collapses to `r == t`, where the
    /// average-velocity target reduces to the instantaneous one.
    pub p_equal: f64,
    /// Weight on the fusion (waypoint reconstruction) loss.
    pub lambda_fusion: f64,
    /// Weight on the flow-matching loss.
    pub lambda_flow: f64,
    /// Weight on the auxiliary map term; reserved, defaults to off.
    pub lambda_map: f64,
    /// Geometry of the flow regression loss.
    pub loss: LossKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 2e-4,
            weight_decay: 0.1,
            warmup_epochs: 3,
            p_equal: 0.25,
            lambda_fusion: 1.0,
            lambda_flow: 1.0,
            lambda_map: 0.0,
            loss: LossKind::L1,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    /// Master seed; all randomness (data, init, training, sampling) derives
    /// from it through named streams.
    pub seed: u64,
    pub dataset: GenConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Structural checks that would otherwise surface as confusing shape
    /// errors deep inside a forward pass.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.width == 0 || self.model.heads == 0 || self.model.depth == 0 {
            return Err(ConfigError::Invalid(
                "model width, depth, and heads must be positive".into(),
            ));
        }
        if self.model.width % self.model.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "heads ({}) must divide width ({})",
                self.model.heads, self.model.width
            )));
        }
        if self.model.k == 0 {
            return Err(ConfigError::Invalid("k must be positive".into()));
        }
        if self.dataset.t_f == 0 || self.dataset.dt <= 0.0 {
            return Err(ConfigError::Invalid(
                "dataset t_f must be positive and dt > 0".into(),
            ));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(ConfigError::Invalid(
                "training epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.training.p_equal) {
            return Err(ConfigError::Invalid("p_equal must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
