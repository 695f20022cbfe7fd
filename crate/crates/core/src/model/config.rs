use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention-pooling sentence head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolerConfig {
    /// Learned queries, one per head.
    pub n_pool_heads: usize,
    /// Full transformer blocks run before the learned-query attention.
    pub n_pool_layers: usize,
}

impl Default for PoolerConfig {
    fn default() -> Self {
        Self {
            n_pool_heads: 4,
            n_pool_layers: 1,
        }
    }
}

/// Shape of the transformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub causal: bool,
    pub rope_base: f64,
    /// Output classes of both the sentence and the token head.
    pub n_classes: usize,
    pub norm_eps: f64,
    pub pooler: PoolerConfig,
}

impl Default for ModelConfig {
    /// 16 layers at toy width, matching the even-layer sweep grid 2..=16.
    fn default() -> Self {
        Self {
            n_layers: 16,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            d_ff: 256,
            vocab_size: 64,
            max_seq: 128,
            causal: false,
            rope_base: 10_000.0,
            n_classes: 2,
            norm_eps: 1e-6,
            pooler: PoolerConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow 16-layer stack used for the training experiments; small enough
    /// to train thousands of steps on one core.
    pub fn compact() -> Self {
        Self {
            n_layers: 16,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            d_ff: 32,
            vocab_size: 17,
            max_seq: 16,
            pooler: PoolerConfig {
                n_pool_heads: 2,
                n_pool_layers: 1,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return fail("layer count, widths and vocabulary must be positive".into());
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embeddings", self.head_dim));
        }
        if self.max_seq < 2 {
            return fail(format!("max_seq {} must be at least 2", self.max_seq));
        }
        if self.n_classes == 0 {
            return fail("n_classes must be positive".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps >= 0.0) {
            return fail("rope_base must be positive and norm_eps non-negative".into());
        }
        let heads = self.pooler.n_pool_heads;
        if heads == 0 || self.d_model % heads != 0 {
            return fail(format!(
                "n_pool_heads ({heads}) must divide d_model ({})",
                self.d_model
            ));
        }
        Ok(())
    }

    fn block_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 3 * d * self.d_ff
    }

    /// Closed-form parameter count:
    /// `V·d + L·(2d + 4d² + 3d·d_ff) + d` for embeddings, blocks and final norm,
    /// `2(d·C + C)` for the token and sentence classifiers,
    /// `P·(2d + 4d² + 3d·d_ff) + d + 2d² + d` for the attention pooler, and
    /// `d·V + V` for the masked-token head.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let c = self.n_classes;
        let trunk = v * d + self.n_layers * self.block_params() + d;
        let heads = 2 * (d * c + c);
        let pooler = self.pooler.n_pool_layers * self.block_params() + d + 2 * d * d + d;
        let mlm = d * v + v;
        trunk + heads + pooler + mlm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::compact().validate().unwrap();
    }

    #[test]
    fn rejects_bad_head_split() {
        let mc = ModelConfig {
            head_dim: 10,
            ..ModelConfig::default()
        };
        assert!(mc.validate().is_err());
        let mc = ModelConfig {
            pooler: PoolerConfig {
                n_pool_heads: 3,
                n_pool_layers: 1,
            },
            ..ModelConfig::default()
        };
        assert!(mc.validate().is_err());
    }
}
