use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the toy decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

impl Default for ModelConfig {
    /// 4 layers, 4 heads, width 64, byte-level vocabulary.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            vocab_size: 256,
            max_positions: 8192,
            rope_theta: default_rope_theta(),
        }
    }
}

impl ModelConfig {
    /// A small 2-layer configuration suited to finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            vocab_size: 32,
            max_positions: 256,
            rope_theta: default_rope_theta(),
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Bytes one cached position occupies across all layers (K and V, f32).
    pub fn kv_row_bytes(&self) -> u64 {
        (self.n_layers * 2 * self.d_model * 4) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::config(format!(
                "rotary embedding needs an even d_head, got {}",
                self.d_head
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta must be a positive real"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size exceeds the token id range"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().kv_row_bytes(), 4 * 2 * 64 * 4);
    }

    #[test]
    fn rejects_inconsistent_heads_and_odd_head_width() {
        let c = ModelConfig {
            d_head: 8,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            n_heads: 2,
            d_head: 3,
            d_model: 6,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
