//! Per-step scoring sources shared by generation and likelihood scoring.

use std::collections::BTreeSet;

use crate::dola::{contrast_distributions, dola_step, layer_rng, ContrastConfig, ContrastOutcome, LayerRng, Strategy};
use crate::model::{softmax, EarlyExitLogits, HiddenStates, KvCache, Model};
use crate::tokenizer::Tokenizer;

use super::{apply_repetition_penalty, DecodeError};

pub(crate) struct Scored {
    pub outcome: ContrastOutcome,
    pub raw_logits: Option<EarlyExitLogits>,
}

pub(crate) trait StepScorer {
    fn max_seq_len(&self) -> usize;
    fn feed(&mut self, tokens: &[u32]) -> Result<(), DecodeError>;
    /// Score the next position. `mature_penalty` is applied to the mature
    /// logits before contrast when set.
    fn score(&mut self, mature_penalty: Option<(&[u32], f64)>, keep_raw: bool) -> Result<Scored, DecodeError>;
}

pub(crate) struct LayerScorer<'a> {
    model: &'a Model,
    cache: KvCache,
    hidden: Option<HiddenStates>,
    taps: BTreeSet<usize>,
    contrast: &'a ContrastConfig,
    rng: LayerRng,
}

impl<'a> LayerScorer<'a> {
    pub fn new(model: &'a Model, contrast: &'a ContrastConfig) -> Result<Self, DecodeError> {
        if matches!(contrast.strategy, Strategy::Cd) {
            return Err(crate::dola::DolaError::NeedsAmateur.into());
        }
        let cfg = model.config();
        contrast.validate(cfg.n_layers, cfg.tied_embeddings)?;
        let taps = contrast.premature_taps();
        model.check_taps(taps.iter().copied())?;
        let seed = match contrast.strategy {
            Strategy::DolaRandom { rng_seed, .. } => rng_seed,
            _ => 0,
        };
        Ok(Self { model, cache: model.new_cache(), hidden: None, taps, contrast, rng: layer_rng(seed) })
    }
}

pub(crate) fn penalize_mature(exit: &mut EarlyExitLogits, penalty: Option<(&[u32], f64)>) {
    if let Some((context, theta)) = penalty {
        let n = exit.mature_layer();
        if let Some(v) = exit.get_mut(n) {
            apply_repetition_penalty(v, context, theta);
        }
    }
}

impl StepScorer for LayerScorer<'_> {
    fn max_seq_len(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn feed(&mut self, tokens: &[u32]) -> Result<(), DecodeError> {
        self.hidden = Some(self.model.forward_step(&mut self.cache, tokens)?);
        Ok(())
    }

    fn score(&mut self, mature_penalty: Option<(&[u32], f64)>, keep_raw: bool) -> Result<Scored, DecodeError> {
        let hidden = self.hidden.as_ref().expect("fed before scoring");
        let raw = self.model.early_exit_logits(hidden, self.taps.iter().copied())?;
        let kept = keep_raw.then(|| raw.clone());
        let mut exit = raw;
        penalize_mature(&mut exit, mature_penalty);
        let outcome = dola_step(&exit, self.contrast, &mut self.rng)?;
        Ok(Scored { outcome, raw_logits: kept })
    }
}

/// Expert and amateur models sharing one tokenizer.
pub struct CdPair<'a> {
    pub expert: &'a Model,
    pub amateur: &'a Model,
}

impl<'a> CdPair<'a> {
    pub fn new(
        expert: &'a Model,
        expert_tokenizer: &dyn Tokenizer,
        amateur: &'a Model,
        amateur_tokenizer: &dyn Tokenizer,
    ) -> Result<Self, DecodeError> {
        if expert.vocab_size() != amateur.vocab_size()
            || expert_tokenizer.fingerprint() != amateur_tokenizer.fingerprint()
        {
            return Err(DecodeError::VocabMismatch);
        }
        Ok(Self { expert, amateur })
    }
}

pub(crate) struct PairScorer<'a> {
    pair: &'a CdPair<'a>,
    caches: (KvCache, KvCache),
    hidden: Option<(HiddenStates, HiddenStates)>,
    config: ContrastConfig,
}

impl<'a> PairScorer<'a> {
    pub fn new(pair: &'a CdPair<'a>, config: ContrastConfig) -> Self {
        Self { pair, caches: (pair.expert.new_cache(), pair.amateur.new_cache()), hidden: None, config }
    }
}

impl StepScorer for PairScorer<'_> {
    fn max_seq_len(&self) -> usize {
        self.pair
            .expert
            .config()
            .max_seq_len
            .min(self.pair.amateur.config().max_seq_len)
    }

    fn feed(&mut self, tokens: &[u32]) -> Result<(), DecodeError> {
        let e = self.pair.expert.forward_step(&mut self.caches.0, tokens)?;
        let a = self.pair.amateur.forward_step(&mut self.caches.1, tokens)?;
        self.hidden = Some((e, a));
        Ok(())
    }

    fn score(&mut self, mature_penalty: Option<(&[u32], f64)>, _keep_raw: bool) -> Result<Scored, DecodeError> {
        let (he, ha) = self.hidden.as_ref().expect("fed before scoring");
        let mut expert = self.pair.expert.early_exit_logits(he, [])?;
        penalize_mature(&mut expert, mature_penalty);
        let amateur = self.pair.amateur.early_exit_logits(ha, [])?;
        let qe = softmax(expert.mature())?;
        let qa = softmax(amateur.mature())?;
        let (v_head, scores, distribution) = contrast_distributions(&qe, &qa, &self.config)?;
        let outcome = ContrastOutcome {
            premature_layer: None,
            jsd_by_layer: Default::default(),
            v_head,
            scores,
            distribution,
        };
        Ok(Scored { outcome, raw_logits: None })
    }
}

