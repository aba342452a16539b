//! Likelihood-based multiple-choice evaluation, two-fold bucket validation,
//! hyperparameter sweeps and open-ended answer extraction.
//!
//! Examples are scored independently, optionally across a worker pool; all
//! reductions are order-independent.

mod dataset;
mod metrics;
mod open;
mod score;
mod sweep;
mod validate;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeError;
use crate::dola::{ContrastConfig, DolaError, MaskValue};
use crate::model::ModelError;
use crate::tokenizer::{Tokenizer, TokenizerError};

pub use dataset::{load_mc_jsonl, load_open_jsonl, McChoice, McExample, OpenExample};
pub use metrics::{metrics_from_scores, McMetrics, ScoredExample};
pub use open::{eval_open, extract_numeric_answer, OpenItem, OpenReport};
pub use score::{score_continuation, score_continuation_with_mask, ChoiceScore, EvalModel};
pub use sweep::{sweep_mc, sweep_open, write_sweep_csv, SweepAxis, SweepRow};
pub use validate::{
    select_two_fold, two_fold_validate, BucketScores, FoldChoice, TwoFoldSelection, ValidationMetric,
    ValidationReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed example {id}: {reason}")]
    MalformedExample { id: String, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset line {line}: {source}")]
    Dataset { line: usize, source: serde_json::Error },
    #[error("prefix must contain at least one token")]
    EmptyPrefix,
    #[error("context overflow: {needed} tokens exceed max_seq_len {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("invalid validation plan: {0}")]
    InvalidPlan(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dola(#[from] DolaError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Rank choices by per-token mean instead of total log-likelihood.
    pub length_normalize: bool,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
    /// Value outside the plausibility set. With `-inf`, any choice token
    /// outside it makes the choice score non-finite and the example invalid.
    pub mask: MaskValue,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { length_normalize: false, workers: 0, mask: MaskValue::Finite }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub metrics: McMetrics,
    pub examples: Vec<ScoredExample>,
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Score every choice of every example. Output order matches input order.
pub fn score_examples(
    dataset: &[McExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    contrast: &ContrastConfig,
    options: EvalOptions,
) -> Result<Vec<ScoredExample>, EvalError> {
    for ex in dataset {
        ex.validate()?;
    }
    with_workers(options.workers, || {
        dataset
            .par_iter()
            .map(|ex| {
                let prefix = tokenizer.encode(&ex.prompt)?;
                let scores = ex
                    .choices
                    .iter()
                    .map(|c| {
                        let cont = tokenizer.encode(&c.text)?;
                        let s = score_continuation_with_mask(model, contrast, &prefix, &cont, options.mask)?;
                        Ok(s.value(options.length_normalize))
                    })
                    .collect::<Result<Vec<_>, EvalError>>()?;
                Ok(ScoredExample { id: ex.id.clone(), is_true: ex.truth(), scores })
            })
            .collect()
    })?
}

/// MC1/MC2/MC3/accuracy of `dataset` under `contrast`.
pub fn eval_mc(
    dataset: &[McExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    contrast: &ContrastConfig,
    options: EvalOptions,
) -> Result<McReport, EvalError> {
    let examples = score_examples(dataset, model, tokenizer, contrast, options)?;
    let metrics = metrics_from_scores(&examples)?;
    Ok(McReport { metrics, examples })
}
