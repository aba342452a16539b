//! Architecture description stored in the weight file header.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `down(silu(gate(x)) * up(x))`
    SiluGated,
    /// `down(gelu(up(x)))`, tanh approximation.
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Positional {
    /// Rotary embeddings, rotate-half convention.
    Rotary,
    LearnedAbsolute,
}

fn default_rotary_base() -> f32 {
    10_000.0
}

fn default_true() -> bool {
    true
}

/// Hyper-parameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f32,
    pub activation: Activation,
    pub positional: Positional,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f32,
    #[serde(default)]
    pub tied_embeddings: bool,
    /// Apply the final norm before projecting intermediate taps. Turning this
    /// off projects raw residual states (ablation only).
    #[serde(default = "default_true")]
    pub exit_norm: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.n_kv_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.n_layers < 1 {
            return bad("n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return bad("n_heads and n_kv_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad("n_heads must be divisible by n_kv_heads");
        }
        if self.positional == Positional::Rotary && self.head_dim() % 2 != 0 {
            return bad("rotary embeddings need an even head dimension");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.max_seq_len < 1 {
            return bad("max_seq_len must be >= 1");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be > 0");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive");
        }
        Ok(())
    }
}
