//! Layer-contrastive scoring.
//!
//! Everything here is a pure function of early-exit logits and a
//! [`ContrastConfig`]; where the logits came from does not matter.

mod bucket;
mod config;
mod contrast;
mod divergence;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{log_softmax, softmax, EarlyExitLogits, ModelError, TokenDistribution};

pub use bucket::{bucket_count, bucket_spans, buckets_for, BucketSource, CandidateBucket};
pub use config::{ContrastConfig, MaskValue, Strategy, DEFAULT_ALPHA, SCORING_MASK};
pub use contrast::{apc_mask, contrast, PREMATURE_FLOOR};
pub use divergence::{jsd, select_premature};

#[derive(Debug, Error)]
pub enum DolaError {
    #[error("distributions differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is not a normalized distribution (sum {0})")]
    Unnormalized(f64),
    #[error("no candidate layers")]
    EmptyCandidates,
    #[error("early-exit logits for layer {0} are missing")]
    MissingTap(usize),
    #[error("invalid bucket: {0}")]
    InvalidBucket(String),
    #[error("invalid contrast config: {0}")]
    InvalidConfig(String),
    #[error("the cd strategy contrasts two models; use the cd decoding entry point")]
    NeedsAmateur,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of one contrast step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastOutcome {
    /// Selected premature layer; `None` for vanilla decoding.
    pub premature_layer: Option<usize>,
    /// JSD (nats) against the mature layer for every layer examined.
    pub jsd_by_layer: BTreeMap<usize, f64>,
    /// Token ids surviving the plausibility constraint, ascending.
    pub v_head: Vec<u32>,
    /// Contrast scores over the vocabulary, mask value outside `v_head`.
    pub scores: Vec<f64>,
    /// `softmax(scores)`, present when post-softmax is enabled.
    pub distribution: Option<TokenDistribution>,
}

/// Per-session random source for `dola-random`.
pub type LayerRng = ChaCha8Rng;

pub fn layer_rng(seed: u64) -> LayerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tap_distribution(exit: &EarlyExitLogits, layer: usize) -> Result<TokenDistribution, DolaError> {
    let logits = exit.get(layer).ok_or(DolaError::MissingTap(layer))?;
    Ok(softmax(logits)?)
}

/// Contrast two already-normalized distributions under the plausibility
/// constraint. Shared by layer contrast and two-model contrast.
pub fn contrast_distributions(
    mature: &TokenDistribution,
    premature: &TokenDistribution,
    config: &ContrastConfig,
) -> Result<(Vec<u32>, Vec<f64>, Option<TokenDistribution>), DolaError> {
    if mature.len() != premature.len() {
        return Err(DolaError::LengthMismatch(mature.len(), premature.len()));
    }
    let v_head = apc_mask(mature, config.alpha);
    let scores = contrast(mature, premature, &v_head, config.mask.value());
    let distribution = if config.post_softmax { Some(softmax(&scores)?) } else { None };
    Ok((v_head, scores, distribution))
}

/// One decoding step of the configured strategy over precomputed early-exit
/// logits. `rng` is only drawn from by `dola-random`.
pub fn dola_step<R: Rng + ?Sized>(
    exit: &EarlyExitLogits,
    config: &ContrastConfig,
    rng: &mut R,
) -> Result<ContrastOutcome, DolaError> {
    let mature = softmax(exit.mature())?;
    let (layer, jsd_by_layer) = match &config.strategy {
        Strategy::Vanilla => {
            let scores = log_softmax(exit.mature())?;
            let v_head = (0..mature.len() as u32).collect();
            return Ok(ContrastOutcome {
                premature_layer: None,
                jsd_by_layer: BTreeMap::new(),
                v_head,
                scores,
                distribution: config.post_softmax.then_some(mature),
            });
        }
        Strategy::Cd => return Err(DolaError::NeedsAmateur),
        Strategy::DolaDynamic { bucket } => {
            let candidates = bucket
                .layers
                .iter()
                .map(|&l| Ok((l, tap_distribution(exit, l)?)))
                .collect::<Result<BTreeMap<_, _>, DolaError>>()?;
            select_premature(&mature, &candidates)?
        }
        Strategy::DolaStatic { static_layer } => {
            let q = tap_distribution(exit, *static_layer)?;
            let d = jsd(&mature, &q)?;
            (*static_layer, BTreeMap::from([(*static_layer, d)]))
        }
        Strategy::DolaRandom { bucket, .. } => {
            if bucket.is_empty() {
                return Err(DolaError::EmptyCandidates);
            }
            let l = bucket.layers[rng.gen_range(0..bucket.len())];
            let q = tap_distribution(exit, l)?;
            let d = jsd(&mature, &q)?;
            (l, BTreeMap::from([(l, d)]))
        }
    };
    let premature = tap_distribution(exit, layer)?;
    let (v_head, scores, distribution) = contrast_distributions(&mature, &premature, config)?;
    Ok(ContrastOutcome { premature_layer: Some(layer), jsd_by_layer, v_head, scores, distribution })
}
