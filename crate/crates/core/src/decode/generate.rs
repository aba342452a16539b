use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dola::{dola_step, layer_rng, ContrastConfig, MaskValue, Strategy};
use crate::model::{EarlyExitLogits, Model};
use crate::tokenizer::Tokenizer;

use super::scorer::{penalize_mature, Scored};
use super::{
    apply_repetition_penalty, next_token, CdPair, DecodeConfig, DecodeError, GenerationTrace,
    LayerScorer, PairScorer, PenaltyScope, PenaltyStage, StepRecord, StepScorer,
};

/// Output of a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub text: String,
    pub trace: GenerationTrace,
}

fn penalty_context<'c>(prompt: &'c [u32], all: &'c [u32], scope: PenaltyScope) -> &'c [u32] {
    match scope {
        PenaltyScope::PromptAndGenerated => all,
        PenaltyScope::GeneratedOnly => &all[prompt.len()..],
    }
}

/// Earliest stop-string match at or after `from` (byte offset, snapped to a
/// char boundary).
fn find_stop(text: &str, stops: &[String], from: usize) -> Option<usize> {
    let mut from = from.min(text.len());
    while !text.is_char_boundary(from) {
        from -= 1;
    }
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text[from..].find(s.as_str()).map(|i| i + from))
        .min()
}

fn run_loop(
    scorer: &mut dyn StepScorer,
    tokenizer: &dyn Tokenizer,
    decode: &DecodeConfig,
    prompt: &[u32],
) -> Result<Generation, DecodeError> {
    decode.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let max = scorer.max_seq_len();
    if prompt.len() + decode.max_new_tokens > max {
        return Err(DecodeError::ContextOverflow {
            prompt: prompt.len(),
            new_tokens: decode.max_new_tokens,
            max,
        });
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let mut all: Vec<u32> = prompt.to_vec();
    let mut trace = GenerationTrace::default();
    let max_stop = decode.stop_strings.iter().map(String::len).max().unwrap_or(0);
    let mut checked = 0usize;
    let theta = decode.repetition_penalty;

    scorer.feed(prompt)?;
    for step in 0..decode.max_new_tokens {
        let context = penalty_context(prompt, &all, decode.penalty_scope);
        let mature_penalty = (decode.penalty_stage == PenaltyStage::MatureLogits).then_some((context, theta));
        let Scored { outcome, raw_logits } = scorer.score(mature_penalty, decode.record_logits)?;
        let mut scores = outcome.scores;
        if decode.penalty_stage == PenaltyStage::Contrasted {
            apply_repetition_penalty(&mut scores, context, theta);
        }
        let token = next_token(&scores, decode, &mut sample_rng)?;
        if decode.stop_token_ids.contains(&token) {
            break;
        }
        all.push(token);
        trace.steps.push(StepRecord {
            token,
            premature_layer: outcome.premature_layer,
            jsd_by_layer: outcome.jsd_by_layer,
            v_head_size: outcome.v_head.len(),
            score: scores[token as usize],
            exit_logits: raw_logits.map(EarlyExitLogits::into_map),
        });

        if max_stop > 0 {
            let generated = &all[prompt.len()..];
            let text = tokenizer.decode(generated);
            // Look back far enough to catch a stop string straddling the
            // previous boundary, plus slack for lossy multi-byte tails.
            if let Some(at) = find_stop(&text, &decode.stop_strings, checked.saturating_sub(max_stop + 3)) {
                let mut keep = generated.len();
                while keep > 0 && tokenizer.decode(&generated[..keep]).len() > at {
                    keep -= 1;
                }
                all.truncate(prompt.len() + keep);
                trace.steps.truncate(keep);
                return Ok(Generation {
                    tokens: all[prompt.len()..].to_vec(),
                    text: text[..at].to_string(),
                    trace,
                });
            }
            checked = text.len();
        }
        if step + 1 < decode.max_new_tokens {
            scorer.feed(&[token])?;
        }
    }
    let tokens = all[prompt.len()..].to_vec();
    let text = tokenizer.decode(&tokens);
    Ok(Generation { tokens, text, trace })
}

/// Decode from `prompt` with layer contrast (or vanilla) per `contrast`.
pub fn generate(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    contrast: &ContrastConfig,
    decode: &DecodeConfig,
    prompt: &[u32],
) -> Result<Generation, DecodeError> {
    let mut scorer = LayerScorer::new(model, contrast)?;
    run_loop(&mut scorer, tokenizer, decode, prompt)
}

/// Two-model contrastive decoding: `ln p_expert - ln p_amateur` on the
/// expert's plausibility set.
pub fn cd_generate(
    pair: &CdPair<'_>,
    tokenizer: &dyn Tokenizer,
    alpha: f64,
    decode: &DecodeConfig,
    prompt: &[u32],
) -> Result<Generation, DecodeError> {
    let config = ContrastConfig::new(Strategy::Cd).with_alpha(alpha).with_mask(MaskValue::NegInfinity);
    config.validate(pair.expert.n_layers(), false)?;
    let mut scorer = PairScorer::new(pair, config);
    run_loop(&mut scorer, tokenizer, decode, prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayStep {
    pub token: u32,
    pub premature_layer: Option<usize>,
}

/// Re-run selection on the logits stored in a trace recorded with
/// `record_logits`.
pub fn replay_trace(
    trace: &GenerationTrace,
    prompt: &[u32],
    contrast: &ContrastConfig,
    decode: &DecodeConfig,
) -> Result<Vec<ReplayStep>, DecodeError> {
    let seed = match contrast.strategy {
        Strategy::DolaRandom { rng_seed, .. } => rng_seed,
        _ => 0,
    };
    let mut rng = layer_rng(seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let mut all = prompt.to_vec();
    let theta = decode.repetition_penalty;
    let mut out = Vec::with_capacity(trace.len());
    for (i, step) in trace.steps.iter().enumerate() {
        let map = step.exit_logits.clone().ok_or(DecodeError::TraceWithoutLogits(i))?;
        let mature = *map.keys().next_back().ok_or(DecodeError::TraceWithoutLogits(i))?;
        let mut exit = EarlyExitLogits::from_map(mature, map)?;
        let context = penalty_context(prompt, &all, decode.penalty_scope);
        if decode.penalty_stage == PenaltyStage::MatureLogits {
            penalize_mature(&mut exit, Some((context, theta)));
        }
        let outcome = dola_step(&exit, contrast, &mut rng)?;
        let mut scores = outcome.scores;
        if decode.penalty_stage == PenaltyStage::Contrasted {
            apply_repetition_penalty(&mut scores, context, theta);
        }
        let token = next_token(&scores, decode, &mut sample_rng)?;
        all.push(token);
        out.push(ReplayStep { token, premature_layer: outcome.premature_layer });
    }
    Ok(out)
}
