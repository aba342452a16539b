//! Decoder-only transformer inference with layer-contrastive decoding.
//!
//! The mature (final) layer's next-token distribution is contrasted against
//! an early-exit distribution from a premature layer, chosen per step as the
//! candidate with the largest Jensen-Shannon divergence from the mature one.

pub mod bench;
pub mod decode;
pub mod dola;
pub mod eval;
pub mod golden;
pub mod model;
pub mod probe;
pub mod synthetic;
pub mod tokenizer;

pub use model::{load_model, Model, ModelConfig, ModelError, TokenDistribution};
pub use tokenizer::{ByteTokenizer, Tokenizer};
