use serde::{Deserialize, Serialize};

use crate::decode::{CdPair, LayerScorer, PairScorer, StepScorer};
use crate::dola::{ContrastConfig, MaskValue, Strategy};
use crate::model::{log_softmax, Model};

use super::EvalError;

/// The model (or expert/amateur pair) a likelihood is computed under.
#[derive(Clone, Copy)]
pub enum EvalModel<'a> {
    Single(&'a Model),
    Pair(&'a CdPair<'a>),
}

impl<'a> From<&'a Model> for EvalModel<'a> {
    fn from(m: &'a Model) -> Self {
        EvalModel::Single(m)
    }
}

impl<'a> From<&'a CdPair<'a>> for EvalModel<'a> {
    fn from(p: &'a CdPair<'a>) -> Self {
        EvalModel::Pair(p)
    }
}

impl EvalModel<'_> {
    pub fn max_seq_len(&self) -> usize {
        match self {
            EvalModel::Single(m) => m.config().max_seq_len,
            EvalModel::Pair(p) => p.expert.config().max_seq_len.min(p.amateur.config().max_seq_len),
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            EvalModel::Single(m) => m.n_layers(),
            EvalModel::Pair(p) => p.expert.n_layers(),
        }
    }

    pub fn tied_embeddings(&self) -> bool {
        match self {
            EvalModel::Single(m) => m.config().tied_embeddings,
            EvalModel::Pair(p) => p.expert.config().tied_embeddings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub index: usize,
    /// Sum over continuation tokens of the per-token score.
    pub total: f64,
    pub tokens: usize,
    /// `total / tokens`, 0 for an empty continuation.
    pub normalized: f64,
}

impl ChoiceScore {
    pub fn value(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.normalized
        } else {
            self.total
        }
    }
}

/// Teacher-forced likelihood of `continuation` after `prefix`.
///
/// The mask is the finite scoring value and no repetition penalty
/// is applied. With post-softmax on, each token contributes the log of its
/// renormalized contrast probability; with it off, the raw contrast score.
/// Vanilla contributes plain mature-layer log-probabilities either way.
pub fn score_continuation<'a>(
    model: impl Into<EvalModel<'a>>,
    contrast: &ContrastConfig,
    prefix: &[u32],
    continuation: &[u32],
) -> Result<ChoiceScore, EvalError> {
    score_continuation_with_mask(model, contrast, prefix, continuation, MaskValue::Finite)
}

/// [`score_continuation`] with an explicit mask, for the mask ablation.
pub fn score_continuation_with_mask<'a>(
    model: impl Into<EvalModel<'a>>,
    contrast: &ContrastConfig,
    prefix: &[u32],
    continuation: &[u32],
    mask: MaskValue,
) -> Result<ChoiceScore, EvalError> {
    let model = model.into();
    let needed = prefix.len() + continuation.len();
    if needed > model.max_seq_len() {
        return Err(EvalError::ContextOverflow { needed, max: model.max_seq_len() });
    }
    if continuation.is_empty() {
        return Ok(ChoiceScore { index: 0, total: 0.0, tokens: 0, normalized: 0.0 });
    }
    if prefix.is_empty() {
        return Err(EvalError::EmptyPrefix);
    }
    let config = contrast.clone().with_mask(mask);
    let mut scorer: Box<dyn StepScorer + '_> = match (model, &config.strategy) {
        (EvalModel::Pair(pair), Strategy::Cd) => Box::new(PairScorer::new(pair, config.clone())),
        (EvalModel::Pair(pair), _) => Box::new(LayerScorer::new(pair.expert, &config)?),
        (EvalModel::Single(m), _) => Box::new(LayerScorer::new(m, &config)?),
    };
    let vanilla = matches!(config.strategy, Strategy::Vanilla);
    scorer.feed(prefix)?;
    let mut total = 0.0;
    for (i, &tok) in continuation.iter().enumerate() {
        let scores = scorer.score(None, false)?.outcome.scores;
        let t = tok as usize;
        total += if vanilla || !config.post_softmax {
            scores[t]
        } else {
            log_softmax(&scores)?[t]
        };
        if i + 1 < continuation.len() {
            scorer.feed(&[tok])?;
        }
    }
    let tokens = continuation.len();
    Ok(ChoiceScore { index: 0, total, tokens, normalized: total / tokens as f64 })
}
