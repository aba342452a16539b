//! Autoregressive generation: repetition penalty, token selection, stop
//! criteria, traces, and the two-model contrastive decoding baseline.

mod generate;
mod scorer;
mod trace;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dola::{DolaError, SCORING_MASK};
use crate::model::{softmax, ModelError};
use crate::tokenizer::TokenizerError;

pub use generate::{cd_generate, generate, replay_trace, Generation, ReplayStep};
pub use scorer::CdPair;
pub(crate) use scorer::{LayerScorer, PairScorer, StepScorer};
pub use trace::{GenerationTrace, StepRecord};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("every score is masked")]
    AllMasked,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("context overflow: prompt of {prompt} tokens plus {new_tokens} new tokens exceeds max_seq_len {max}")]
    ContextOverflow { prompt: usize, new_tokens: usize, max: usize },
    #[error("expert and amateur vocabularies differ")]
    VocabMismatch,
    #[error("trace step {0} has no recorded logits")]
    TraceWithoutLogits(usize),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dola(#[from] DolaError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Greedy,
    Sample,
}

/// Which tokens count as "seen" for the repetition penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScope {
    #[default]
    PromptAndGenerated,
    GeneratedOnly,
}

/// Where the repetition penalty is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyStage {
    /// On the contrast scores, right before token selection.
    #[default]
    Contrasted,
    /// On the mature-layer logits, before the contrast (ablation).
    MatureLogits,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_new_tokens() -> usize {
    256
}
fn default_penalty() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default)]
    pub mode: SelectionMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_penalty")]
    pub repetition_penalty: f64,
    #[serde(default)]
    pub penalty_scope: PenaltyScope,
    #[serde(default)]
    pub penalty_stage: PenaltyStage,
    #[serde(default)]
    pub stop_token_ids: Vec<u32>,
    #[serde(default)]
    pub stop_strings: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Keep every step's early-exit logits in the trace (for replay).
    #[serde(default)]
    pub record_logits: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Greedy,
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            repetition_penalty: default_penalty(),
            penalty_scope: PenaltyScope::PromptAndGenerated,
            penalty_stage: PenaltyStage::Contrasted,
            stop_token_ids: Vec::new(),
            stop_strings: Vec::new(),
            seed: 0,
            record_logits: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, ..Self::default() }
    }

    pub fn with_penalty(mut self, theta: f64) -> Self {
        self.repetition_penalty = theta;
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_new_tokens < 1 {
            return Err(DecodeError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(DecodeError::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(DecodeError::InvalidConfig("repetition penalty must be >= 1".into()));
        }
        Ok(())
    }
}

/// CTRL-style penalty for every distinct id in `context`: positive scores
/// are divided by `theta`, negative ones multiplied. Masked entries (`-inf`
/// or the finite scoring mask) are left alone.
pub fn apply_repetition_penalty(scores: &mut [f64], context: &[u32], theta: f64) {
    if theta == 1.0 {
        return;
    }
    let seen: HashSet<u32> = context.iter().copied().collect();
    for id in seen {
        let Some(s) = scores.get_mut(id as usize) else { continue };
        if !s.is_finite() || *s == SCORING_MASK {
            continue;
        }
        if *s > 0.0 {
            *s /= theta;
        } else if *s < 0.0 {
            *s *= theta;
        }
    }
}

/// Greedy: smallest id holding the maximum finite score. Sample: draw from
/// `softmax(scores / temperature)`.
pub fn next_token<R: Rng + ?Sized>(
    scores: &[f64],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<u32, DecodeError> {
    if !scores.iter().any(|s| s.is_finite()) {
        return Err(DecodeError::AllMasked);
    }
    match config.mode {
        SelectionMode::Greedy => {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (i, &s) in scores.iter().enumerate() {
                if s.is_finite() && s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            Ok(best as u32)
        }
        SelectionMode::Sample => {
            let scaled: Vec<f64> = scores.iter().map(|s| s / config.temperature).collect();
            let p = softmax(&scaled).map_err(|_| DecodeError::AllMasked)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0usize;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    acc += pi;
                    last = i;
                    if u < acc {
                        return Ok(i as u32);
                    }
                }
            }
            Ok(last as u32)
        }
    }
}
