use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder, its adapters, and both heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub adapter_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub adapters_enabled: bool,
    /// Dropout rate used during training forward passes. Off by default.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// The encoder-base shape with a bottleneck of `adapter_dim`.
    pub fn base(vocab_size: usize, adapter_dim: usize, n_classes: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            adapter_dim,
            vocab_size,
            max_len: 514,
            n_classes,
            adapters_enabled: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("adapter_dim", self.adapter_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "{} heads do not divide hidden size {}",
                    self.heads, self.hidden
                ),
            ));
        }
        if self.hidden < 2 {
            return Err(Error::config(
                "hidden",
                "layer norm needs at least 2 features",
            ));
        }
        if self.adapter_dim >= self.hidden {
            return Err(Error::config(
                "adapter_dim",
                format!(
                    "bottleneck {} must be smaller than hidden {}",
                    self.adapter_dim, self.hidden
                ),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
