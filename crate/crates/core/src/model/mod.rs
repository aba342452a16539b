//! Decoder-only transformer with early-exit taps.
//!
//! A [`Model`] is immutable once loaded and can be shared across threads.
//! Decoding state lives in a per-session [`KvCache`].
//!
//! Tensor names expected in the weight file (`{i}` is the block index):
//!
//! | name | shape | when |
//! |------|-------|------|
//! | `tok_embeddings.weight` | `[vocab, d_model]` | always |
//! | `pos_embeddings.weight` | `[max_seq_len, d_model]` | learned-absolute |
//! | `layers.{i}.attn_norm.weight` / `.bias` | `[d_model]` | bias for layernorm |
//! | `layers.{i}.attn.{q,o}.weight` | `[d_model, d_model]` | always |
//! | `layers.{i}.attn.{k,v}.weight` | `[kv_dim, d_model]` | always |
//! | `layers.{i}.ffn_norm.weight` / `.bias` | `[d_model]` | bias for layernorm |
//! | `layers.{i}.ffn.gate.weight` | `[d_ff, d_model]` | silu-gated |
//! | `layers.{i}.ffn.up.weight` | `[d_ff, d_model]` | always |
//! | `layers.{i}.ffn.down.weight` | `[d_model, d_ff]` | always |
//! | `norm.weight` / `norm.bias` | `[d_model]` | bias for layernorm |
//! | `output.weight` | `[vocab, d_model]` | untied only |
//!
//! Every linear layer may carry an optional `.bias` of its output width.

mod cache;
mod config;
mod forward;
mod softmax;
pub mod weights;

use std::path::Path;

use thiserror::Error;

pub use cache::KvCache;
pub use config::{Activation, ModelConfig, NormKind, Positional};
pub use forward::{EarlyExitLogits, HiddenStates};
pub use softmax::{argmax, log_softmax, softmax, TokenDistribution, NORMALIZATION_TOLERANCE};
pub use weights::{DType, Tensor, WeightStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad magic: not a DOLAWGT1 weight file")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u32),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("weight file truncated")]
    Truncated,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("context overflow: {needed} positions needed, max_seq_len is {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("tap {tap} out of range for a {n_layers}-layer model")]
    TapOutOfRange { tap: usize, n_layers: usize },
    #[error("layer 0 cannot be tapped: embeddings are tied to the output head")]
    TiedEmbeddingTap,
    #[error("every logit is masked")]
    AllMasked,
    #[error("input is not a normalized distribution (sum {0})")]
    Unnormalized(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

pub mod names {
    pub const TOK_EMBEDDINGS: &str = "tok_embeddings.weight";
    pub const POS_EMBEDDINGS: &str = "pos_embeddings.weight";
    pub const FINAL_NORM: &str = "norm";
    pub const OUTPUT: &str = "output.weight";

    pub fn block(i: usize, part: &str) -> String {
        format!("layers.{i}.{part}")
    }

    pub fn weight(prefix: &str) -> String {
        format!("{prefix}.weight")
    }

    pub fn bias(prefix: &str) -> String {
        format!("{prefix}.bias")
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub attn_norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn_norm: Norm,
    pub gate: Option<Linear>,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub pos: Option<usize>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head: usize,
}

/// Loaded weights plus their resolved layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: WeightStore,
    layout: Layout,
}

struct Resolver<'a> {
    store: &'a WeightStore,
}

impl Resolver<'_> {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<usize, ModelError> {
        let idx = self
            .store
            .position(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        let got = &self.store.by_position(idx).shape;
        if got != shape {
            return Err(ModelError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: got.clone(),
            });
        }
        Ok(idx)
    }

    fn optional(&self, name: &str, shape: &[usize]) -> Result<Option<usize>, ModelError> {
        if self.store.contains(name) {
            self.tensor(name, shape).map(Some)
        } else {
            Ok(None)
        }
    }

    fn linear(&self, prefix: &str, rows: usize, cols: usize) -> Result<Linear, ModelError> {
        Ok(Linear {
            w: self.tensor(&names::weight(prefix), &[rows, cols])?,
            b: self.optional(&names::bias(prefix), &[rows])?,
            rows,
            cols,
        })
    }

    fn norm(&self, prefix: &str, kind: NormKind, d: usize) -> Result<Norm, ModelError> {
        let w = self.tensor(&names::weight(prefix), &[d])?;
        let b = match kind {
            NormKind::LayerNorm => Some(self.tensor(&names::bias(prefix), &[d])?),
            NormKind::RmsNorm => None,
        };
        Ok(Norm { w, b })
    }
}

impl Model {
    /// Validate a tensor table against `config` and bundle them.
    pub fn from_parts(config: ModelConfig, store: WeightStore) -> Result<Self, ModelError> {
        config.validate()?;
        let r = Resolver { store: &store };
        let d = config.d_model;
        let kv = config.kv_dim();
        let embed = r.tensor(names::TOK_EMBEDDINGS, &[config.vocab_size, d])?;
        let pos = match config.positional {
            Positional::LearnedAbsolute => {
                Some(r.tensor(names::POS_EMBEDDINGS, &[config.max_seq_len, d])?)
            }
            Positional::Rotary => None,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |part: &str| names::block(i, part);
            blocks.push(Block {
                attn_norm: r.norm(&p("attn_norm"), config.norm_kind, d)?,
                q: r.linear(&p("attn.q"), d, d)?,
                k: r.linear(&p("attn.k"), kv, d)?,
                v: r.linear(&p("attn.v"), kv, d)?,
                o: r.linear(&p("attn.o"), d, d)?,
                ffn_norm: r.norm(&p("ffn_norm"), config.norm_kind, d)?,
                gate: match config.activation {
                    Activation::SiluGated => Some(r.linear(&p("ffn.gate"), config.d_ff, d)?),
                    Activation::Gelu => None,
                },
                up: r.linear(&p("ffn.up"), config.d_ff, d)?,
                down: r.linear(&p("ffn.down"), d, config.d_ff)?,
            });
        }
        let final_norm = r.norm(names::FINAL_NORM, config.norm_kind, d)?;
        let head = if config.tied_embeddings {
            embed
        } else {
            r.tensor(names::OUTPUT, &[config.vocab_size, d])?
        };
        let layout = Layout { embed, pos, blocks, final_norm, head };
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.store
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        weights::save_weights(path, &self.config, &self.store)
    }

    pub(crate) fn t(&self, idx: usize) -> &[f32] {
        &self.store.by_position(idx).data
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// Read a weight file and validate it into a [`Model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    let (config, store) = weights::read_weights(path)?;
    Model::from_parts(config, store)
}

/// Same as [`load_model`] for an in-memory buffer.
pub fn load_model_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    let (config, store) = weights::decode_weights(bytes)?;
    Model::from_parts(config, store)
}
