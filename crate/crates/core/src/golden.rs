//! Reference vectors shipped next to an exported checkpoint (`golden.json`):
//!
//! ```json
//! {
//!   "prompt": "The capital of France is",
//!   "token_ids": [464, 3139, 286, 4881, 318],
//!   "top_logits": [{"id": 6342, "value": -61.25}, ...],
//!   "continuation": " Paris, and ...",
//!   "continuation_ids": [6342, 11, ...],
//!   "parameter_count": 124439808
//! }
//! ```
//!
//! `top_logits` are final-layer logits at the last prompt position, highest
//! first. The continuation is greedy vanilla decoding with no penalty.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{generate, DecodeConfig, DecodeError};
use crate::dola::ContrastConfig;
use crate::model::{Model, ModelError};
use crate::tokenizer::{Tokenizer, TokenizerError};

/// Relative tolerance on the reference logits.
pub const LOGIT_RTOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GoldenError {
    #[error("golden file has no prompt tokens")]
    EmptyPrompt,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("golden json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopLogit {
    pub id: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub prompt: String,
    pub token_ids: Vec<u32>,
    pub top_logits: Vec<TopLogit>,
    pub continuation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<usize>,
}

impl Golden {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GoldenError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GoldenError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn continuation_len(&self) -> usize {
        self.continuation_ids.as_ref().map_or(20, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub tokenization_match: bool,
    pub max_rel_error: f64,
    pub logits_match: bool,
    pub generated_text: String,
    pub continuation_text_match: bool,
    pub continuation_ids_match: Option<bool>,
    pub parameter_count: usize,
    pub parameter_count_match: Option<bool>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.tokenization_match
            && self.logits_match
            && self.continuation_text_match
            && self.continuation_ids_match != Some(false)
            && self.parameter_count_match != Some(false)
    }
}

fn greedy_plain(n: usize) -> DecodeConfig {
    DecodeConfig::greedy(n).with_penalty(1.0)
}

fn final_logits(model: &Model, tokens: &[u32]) -> Result<Vec<f64>, GoldenError> {
    let mut cache = model.new_cache();
    let hidden = model.forward_step(&mut cache, tokens)?;
    Ok(model.early_exit_logits(&hidden, [])?.mature().to_vec())
}

/// Compare the model against a golden file.
pub fn check_golden(model: &Model, tokenizer: &dyn Tokenizer, golden: &Golden) -> Result<GoldenReport, GoldenError> {
    if golden.token_ids.is_empty() {
        return Err(GoldenError::EmptyPrompt);
    }
    let tokenization_match = tokenizer.encode(&golden.prompt)? == golden.token_ids;
    let logits = final_logits(model, &golden.token_ids)?;
    let mut max_rel_error: f64 = 0.0;
    for t in &golden.top_logits {
        let ours = logits.get(t.id as usize).copied().unwrap_or(f64::NAN);
        let rel = (ours - t.value).abs() / t.value.abs().max(1e-6);
        max_rel_error = if rel.is_nan() { f64::INFINITY } else { max_rel_error.max(rel) };
    }
    let out = generate(
        model,
        tokenizer,
        &ContrastConfig::vanilla(),
        &greedy_plain(golden.continuation_len()),
        &golden.token_ids,
    )?;
    let parameter_count = model.parameter_count();
    Ok(GoldenReport {
        tokenization_match,
        max_rel_error,
        logits_match: max_rel_error <= LOGIT_RTOL,
        continuation_text_match: out.text == golden.continuation,
        continuation_ids_match: golden.continuation_ids.as_ref().map(|ids| *ids == out.tokens),
        generated_text: out.text,
        parameter_count,
        parameter_count_match: golden.parameter_count.map(|c| c == parameter_count),
    })
}

/// Produce a golden record from this engine itself (top `k` logits and an
/// `n`-token greedy continuation).
pub fn make_golden(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    prompt: &str,
    k: usize,
    n: usize,
) -> Result<Golden, GoldenError> {
    let token_ids = tokenizer.encode(prompt)?;
    if token_ids.is_empty() {
        return Err(GoldenError::EmptyPrompt);
    }
    let logits = final_logits(model, &token_ids)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let top_logits = order.iter().take(k).map(|&i| TopLogit { id: i as u32, value: logits[i] }).collect();
    let out = generate(model, tokenizer, &ContrastConfig::vanilla(), &greedy_plain(n), &token_ids)?;
    Ok(Golden {
        prompt: prompt.to_string(),
        token_ids,
        top_logits,
        continuation: out.text,
        continuation_ids: Some(out.tokens),
        parameter_count: Some(model.parameter_count()),
    })
}
