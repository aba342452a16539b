//! Layer probes: per-layer JSD matrices over teacher-forced targets and the
//! critical-layer histogram split by entity and non-entity targets.
//!
//! The histogram uses teacher forcing, so the model is conditioned on gold
//! text rather than its own outputs; this can add noise and is not corrected.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::GenerationTrace;
use crate::dola::{jsd, select_premature, DolaError};
use crate::model::{softmax, EarlyExitLogits, Model, ModelError, TokenDistribution};
use crate::tokenizer::{Tokenizer, TokenizerError};

/// Matrix entries are JSD in nats times this factor.
pub const JSD_SCALE: f64 = 1e5;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("tap {0} is not an even layer or 0")]
    OddTap(usize),
    #[error("no taps left to probe")]
    NoTaps,
    #[error("item {item}: {tokens} tokens but {flags} entity flags")]
    MisalignedAnnotations { item: usize, tokens: usize, flags: usize },
    #[error("trace step {step} has no JSD for layer {layer}")]
    MissingTraceLayer { step: usize, layer: usize },
    #[error("context overflow: {needed} tokens exceed max_seq_len {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dola(#[from] DolaError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Rows are taps, columns target positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdMatrix {
    pub taps: Vec<usize>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl JsdMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.taps.len(), self.labels.len())
    }

    /// Rebuild from the JSD maps stored in a generation trace.
    pub fn from_trace(trace: &GenerationTrace, taps: &[usize], labels: Vec<String>) -> Result<Self, ProbeError> {
        let mut values = vec![Vec::with_capacity(trace.len()); taps.len()];
        for (t, step) in trace.steps.iter().enumerate() {
            for (row, &tap) in values.iter_mut().zip(taps) {
                let d = step
                    .jsd_by_layer
                    .get(&tap)
                    .ok_or(ProbeError::MissingTraceLayer { step: t, layer: tap })?;
                row.push(d * JSD_SCALE);
            }
        }
        Ok(Self { taps: taps.to_vec(), labels, values })
    }

    /// First column is the tap index, header row holds the token labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ProbeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(std::iter::once("layer".to_string()).chain(self.labels.iter().cloned()))?;
        for (tap, row) in self.taps.iter().zip(&self.values) {
            w.write_record(std::iter::once(tap.to_string()).chain(row.iter().map(|v| v.to_string())))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every even layer below the mature one, without 0 for tied embeddings.
pub fn default_taps(model: &Model) -> Vec<usize> {
    let start = usize::from(model.config().tied_embeddings) * 2;
    (start..model.n_layers()).step_by(2).collect()
}

fn normalize_taps(model: &Model, taps: &[usize]) -> Result<Vec<usize>, ProbeError> {
    let n = model.n_layers();
    let mut out: Vec<usize> = taps.iter().copied().filter(|&t| t != n).collect();
    out.sort_unstable();
    out.dedup();
    if let Some(&odd) = out.iter().find(|&&t| t % 2 == 1) {
        return Err(ProbeError::OddTap(odd));
    }
    model.check_taps(out.iter().copied())?;
    if out.is_empty() {
        return Err(ProbeError::NoTaps);
    }
    Ok(out)
}

/// Teacher-force `targets` after `prompt`, calling `visit` with the
/// early-exit logits that predict each target.
fn teacher_force(
    model: &Model,
    prompt: &[u32],
    targets: &[u32],
    taps: &[usize],
    mut visit: impl FnMut(usize, EarlyExitLogits) -> Result<(), ProbeError>,
) -> Result<(), ProbeError> {
    if prompt.is_empty() {
        return Err(ProbeError::EmptyPrompt);
    }
    let needed = prompt.len() + targets.len();
    let max = model.config().max_seq_len;
    if needed > max {
        return Err(ProbeError::ContextOverflow { needed, max });
    }
    let mut cache = model.new_cache();
    let mut hidden = model.forward_step(&mut cache, prompt)?;
    for (t, &tok) in targets.iter().enumerate() {
        visit(t, model.early_exit_logits(&hidden, taps.iter().copied())?)?;
        if t + 1 < targets.len() {
            hidden = model.forward_step(&mut cache, &[tok])?;
        }
    }
    Ok(())
}

fn tap_distributions(exit: &EarlyExitLogits, taps: &[usize]) -> Result<BTreeMap<usize, TokenDistribution>, ProbeError> {
    taps.iter()
        .map(|&l| {
            let logits = exit.get(l).ok_or(DolaError::MissingTap(l))?;
            Ok((l, softmax(logits)?))
        })
        .collect()
}

/// JSD (scaled by [`JSD_SCALE`]) between the mature layer and each tap, for
/// each teacher-forced target position. The mature layer itself is dropped
/// from `taps`.
pub fn jsd_matrix(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    prompt: &[u32],
    targets: &[u32],
    taps: &[usize],
) -> Result<JsdMatrix, ProbeError> {
    let taps = normalize_taps(model, taps)?;
    let mut values = vec![Vec::with_capacity(targets.len()); taps.len()];
    teacher_force(model, prompt, targets, &taps, |_, exit| {
        let mature = softmax(exit.mature())?;
        for (row, q) in values.iter_mut().zip(tap_distributions(&exit, &taps)?.values()) {
            row.push(jsd(&mature, q)? * JSD_SCALE);
        }
        Ok(())
    })?;
    let labels = targets.iter().map(|&t| tokenizer.token_label(t)).collect();
    Ok(JsdMatrix { taps, labels, values })
}

/// Token ids with an entity flag per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedItem {
    pub tokens: Vec<u32>,
    pub is_entity: Vec<bool>,
}

/// Text spans with an entity flag per span; tokenized span by span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    pub text: String,
    pub is_entity: bool,
}

/// One corpus line: either pre-tokenized or span-annotated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusItem {
    Tokens(AnnotatedItem),
    Spans { spans: Vec<AnnotatedSpan> },
}

impl CorpusItem {
    pub fn resolve(&self, tokenizer: &dyn Tokenizer) -> Result<AnnotatedItem, ProbeError> {
        match self {
            CorpusItem::Tokens(item) => Ok(item.clone()),
            CorpusItem::Spans { spans } => {
                let mut out = AnnotatedItem { tokens: Vec::new(), is_entity: Vec::new() };
                for span in spans {
                    let ids = tokenizer.encode(&span.text)?;
                    out.is_entity.extend(std::iter::repeat(span.is_entity).take(ids.len()));
                    out.tokens.extend(ids);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub entity_count: usize,
    pub nonentity_count: usize,
    pub entity_pct: f64,
    pub nonentity_pct: f64,
}

/// Per candidate layer, how often it had the largest JSD from the mature
/// layer. Percentages are per column and sum to 100 unless that column is
/// empty (then all zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalHistogram {
    pub rows: Vec<HistogramRow>,
    pub entity_total: usize,
    pub nonentity_total: usize,
}

impl CriticalHistogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ProbeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "entity_pct", "nonentity_pct"])?;
        for r in &self.rows {
            w.write_record([r.layer.to_string(), r.entity_pct.to_string(), r.nonentity_pct.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramOptions {
    /// Prepend the tokenizer's BOS so the first token is also predicted.
    pub prepend_bos: bool,
    pub workers: usize,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        Self { prepend_bos: true, workers: 0 }
    }
}

/// Argmax-JSD tap for every predicted position of every item, tallied by
/// whether the target token is an entity.
pub fn critical_layer_histogram(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    corpus: &[AnnotatedItem],
    taps: &[usize],
    options: HistogramOptions,
) -> Result<CriticalHistogram, ProbeError> {
    let taps = normalize_taps(model, taps)?;
    for (i, item) in corpus.iter().enumerate() {
        if item.tokens.len() != item.is_entity.len() {
            return Err(ProbeError::MisalignedAnnotations {
                item: i,
                tokens: item.tokens.len(),
                flags: item.is_entity.len(),
            });
        }
    }
    let bos = if options.prepend_bos { tokenizer.bos() } else { None };
    let tally_item = |item: &AnnotatedItem| -> Result<Vec<(usize, bool)>, ProbeError> {
        let (prompt, targets, flags) = match bos {
            Some(b) => (vec![b], &item.tokens[..], &item.is_entity[..]),
            None if item.tokens.len() >= 2 => (vec![item.tokens[0]], &item.tokens[1..], &item.is_entity[1..]),
            None => return Ok(Vec::new()),
        };
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let mut hits = Vec::with_capacity(targets.len());
        teacher_force(model, &prompt, targets, &taps, |t, exit| {
            let mature = softmax(exit.mature())?;
            let (layer, _) = select_premature(&mature, &tap_distributions(&exit, &taps)?)?;
            hits.push((layer, flags[t]));
            Ok(())
        })?;
        Ok(hits)
    };
    let run = || corpus.par_iter().map(tally_item).collect::<Result<Vec<_>, ProbeError>>();
    let per_item = if options.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?
            .install(run)?
    };
    let mut counts: BTreeMap<usize, (usize, usize)> = taps.iter().map(|&l| (l, (0, 0))).collect();
    for (layer, entity) in per_item.into_iter().flatten() {
        let c = counts.get_mut(&layer).expect("selected layer is a tap");
        if entity {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    let entity_total: usize = counts.values().map(|c| c.0).sum();
    let nonentity_total: usize = counts.values().map(|c| c.1).sum();
    let pct = |k: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * k as f64 / total as f64 };
    let rows = counts
        .into_iter()
        .map(|(layer, (e, ne))| HistogramRow {
            layer,
            entity_count: e,
            nonentity_count: ne,
            entity_pct: pct(e, entity_total),
            nonentity_pct: pct(ne, nonentity_total),
        })
        .collect();
    Ok(CriticalHistogram { rows, entity_total, nonentity_total })
}
