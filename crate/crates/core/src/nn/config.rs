use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosEncoding {
    LearnedAbsolute,
    Rotary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

/// Architecture hyperparameters of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum number of positions a forward pass may cover.
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    pub dtype: DType,
    /// Base of the rotary frequency ladder (ignored for learned positions).
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("d_model not divisible by n_heads".into()));
        }
        if self.pos_encoding == PosEncoding::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("rotary positions need an even head dimension".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must be finite and > 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(vocab_size: usize, d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        n_layers,
        d_model,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq_len: 32,
        pos_encoding: PosEncoding::Rotary,
        dtype: DType::F64,
        rope_base: 10_000.0,
        init_std: 0.3,
    }
}
