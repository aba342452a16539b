//! Small randomly initialised models for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    names, Activation, Model, ModelConfig, ModelError, NormKind, Positional, Tensor, WeightStore,
};

/// 8-layer rotary/RMSNorm/SiLU toy sized for the byte-level tokenizer.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 256,
        vocab_size: crate::tokenizer::ByteTokenizer::VOCAB_SIZE,
        max_seq_len: 512,
        norm_kind: NormKind::RmsNorm,
        norm_eps: 1e-5,
        activation: Activation::SiluGated,
        positional: Positional::Rotary,
        rotary_base: 10_000.0,
        tied_embeddings: false,
        exit_norm: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockInit {
    Random,
    /// All block projections zero, so every block is the identity on the
    /// residual stream and every tap carries the embedding.
    Identity,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: Vec<usize>, scale: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape, data)
    }

    fn ones(&self, d: usize) -> Tensor {
        Tensor::new(vec![d], vec![1.0; d])
    }
}

/// Build a model with uniformly initialised weights from `seed`.
pub fn random_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    build(config, seed, BlockInit::Random)
}

/// Build a model whose blocks are all identity maps.
pub fn identity_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    build(config, seed, BlockInit::Identity)
}

pub fn build(config: ModelConfig, seed: u64, blocks: BlockInit) -> Result<Model, ModelError> {
    config.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut store = WeightStore::new();
    let d = config.d_model;
    let kv = config.kv_dim();
    let ff = config.d_ff;
    // Embedding/head scales chosen so that logits span a few nats.
    store.insert(names::TOK_EMBEDDINGS, init.uniform(vec![config.vocab_size, d], 1.0));
    if config.positional == Positional::LearnedAbsolute {
        store.insert(names::POS_EMBEDDINGS, init.uniform(vec![config.max_seq_len, d], 0.1));
    }

    let norm = |store: &mut WeightStore, init: &Init, prefix: &str| {
        store.insert(names::weight(prefix), init.ones(d));
        if config.norm_kind == NormKind::LayerNorm {
            store.insert(names::bias(prefix), Tensor::zeros(vec![d]));
        }
    };

    let linear = |store: &mut WeightStore, init: &mut Init, prefix: String, rows, cols| {
        let t = match blocks {
            BlockInit::Random => init.uniform(vec![rows, cols], (3.0 / cols as f32).sqrt()),
            BlockInit::Identity => Tensor::zeros(vec![rows, cols]),
        };
        store.insert(names::weight(&prefix), t);
    };

    for i in 0..config.n_layers {
        let p = |part: &str| names::block(i, part);
        norm(&mut store, &init, &p("attn_norm"));
        linear(&mut store, &mut init, p("attn.q"), d, d);
        linear(&mut store, &mut init, p("attn.k"), kv, d);
        linear(&mut store, &mut init, p("attn.v"), kv, d);
        linear(&mut store, &mut init, p("attn.o"), d, d);
        norm(&mut store, &init, &p("ffn_norm"));
        if config.activation == Activation::SiluGated {
            linear(&mut store, &mut init, p("ffn.gate"), ff, d);
        }
        linear(&mut store, &mut init, p("ffn.up"), ff, d);
        linear(&mut store, &mut init, p("ffn.down"), d, ff);
    }
    norm(&mut store, &init, names::FINAL_NORM);
    if !config.tied_embeddings {
        let scale = 2.0 / (d as f32).sqrt();
        store.insert(names::OUTPUT, init.uniform(vec![config.vocab_size, d], scale));
    }
    Model::from_parts(config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid_and_deterministic() {
        let a = random_model(toy_config(), 7).unwrap();
        let b = random_model(toy_config(), 7).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn every_variant_builds() {
        for norm_kind in [NormKind::RmsNorm, NormKind::LayerNorm] {
            for activation in [Activation::SiluGated, Activation::Gelu] {
                for positional in [Positional::Rotary, Positional::LearnedAbsolute] {
                    for tied in [false, true] {
                        let mut c = toy_config();
                        c.n_layers = 2;
                        c.norm_kind = norm_kind;
                        c.activation = activation;
                        c.positional = positional;
                        c.tied_embeddings = tied;
                        random_model(c, 1).unwrap();
                    }
                }
            }
        }
    }
}
