use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture dimensions of a GQA transformer with gated FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_kv_groups: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Small default used by tests and the synthetic harness.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            num_kv_groups: 2,
            head_dim: 16,
            vocab_size: 128,
            max_seq: 2048,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("num_kv_groups", self.num_kv_groups),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_groups) {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads ({}) must be divisible by num_kv_groups ({})",
                self.num_heads, self.num_kv_groups
            )));
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads * head_dim = {} but hidden_dim = {}",
                self.num_heads * self.head_dim,
                self.hidden_dim
            )));
        }
        Ok(())
    }

    /// KV group shared by query head `head`.
    pub fn group_of(&self, head: usize) -> usize {
        head / (self.num_heads / self.num_kv_groups)
    }

    pub(crate) fn as_u32_fields(&self) -> [usize; 8] {
        [
            self.num_layers,
            self.hidden_dim,
            self.ffn_dim,
            self.num_heads,
            self.num_kv_groups,
            self.head_dim,
            self.vocab_size,
            self.max_seq,
        ]
    }

    pub(crate) fn from_u32_fields(f: [usize; 8]) -> Self {
        Self {
            num_layers: f[0],
            hidden_dim: f[1],
            ffn_dim: f[2],
            num_heads: f[3],
            num_kv_groups: f[4],
            head_dim: f[5],
            vocab_size: f[6],
            max_seq: f[7],
        }
    }

    /// Number of f32 parameters in one transformer layer.
    pub fn layer_params(&self) -> usize {
        let (d, m, dh) = (self.hidden_dim, self.ffn_dim, self.head_dim);
        self.num_heads * d * dh
            + 2 * self.num_kv_groups * d * dh
            + self.num_heads * dh * d
            + 3 * d * m
    }

    /// Total f32 parameters: embedding, layers, unembedding.
    pub fn total_params(&self) -> usize {
        2 * self.vocab_size * self.hidden_dim + self.num_layers * self.layer_params()
    }
}
