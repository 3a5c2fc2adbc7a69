//! Pre-norm decoder-only transformer with a KV cache.

mod engine;
mod weights;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::segments::TokenId;

pub use engine::{
    DecodeOutput, GenerateOptions, GenerationResult, InferenceMode, KVCache, LayerAttention,
    LayerCache, Model, PrefillOutput, StopReason, Timings,
};
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, synth_weights, tensor_names,
    uniform_from_u32, LayerWeights, WeightFormatError, WeightSet, SYNTH_RANGE, WEIGHT_MAGIC,
    WEIGHT_VERSION,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("`{field}` must be at least 1")]
    Zero { field: &'static str },
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("cannot read model config: {0}")]
    Parse(String),
}

/// Architecture hyperparameters. JSON field names match the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab: 512,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero { field });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Reserved end-of-sequence id.
    pub fn eos_id(&self) -> TokenId {
        0
    }

    /// Ids used for text segments: `1 .. vocab/2`.
    pub fn text_ids(&self) -> Range<TokenId> {
        1..(self.vocab / 2) as TokenId
    }

    /// Synthetic image-token ids: `vocab/2 .. vocab`.
    pub fn image_ids(&self) -> Range<TokenId> {
        (self.vocab / 2) as TokenId..self.vocab as TokenId
    }
}
