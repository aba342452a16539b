use std::collections::HashSet;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::decode::{cd_generate, generate, DecodeConfig};
use crate::dola::{ContrastConfig, Strategy};
use crate::tokenizer::Tokenizer;

use super::{with_workers, EvalError, EvalModel, OpenExample};

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?\d[\d,]*(?:\.\d+)?").expect("static pattern"))
}

/// Last standalone number in `text`, commas removed. A number glued to a
/// letter or underscore (`x2`, `3rd`) does not count.
pub fn extract_numeric_answer(text: &str) -> Option<String> {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    number_re()
        .find_iter(text)
        .filter(|m| {
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            !before.is_some_and(is_word) && !after.is_some_and(is_word)
        })
        .last()
        .map(|m| {
            let s = m.as_str().trim_end_matches(',').replace(',', "");
            s.strip_prefix('+').map(str::to_string).unwrap_or(s)
        })
}

fn same_number(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn repeated_bigram_rate(tokens: &[u32]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let repeats = tokens.windows(2).filter(|w| !seen.insert((w[0], w[1]))).count();
    repeats as f64 / (tokens.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenItem {
    pub id: String,
    pub text: String,
    pub tokens: usize,
    pub answer: Option<String>,
    /// Set when the example has a reference with a number in it.
    pub correct: Option<bool>,
    pub repeated_bigram_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenReport {
    pub items: Vec<OpenItem>,
    /// Exact numeric match over items with a numeric reference.
    pub accuracy: Option<f64>,
    pub repeated_bigram_rate: f64,
}

/// Generate for every prompt and score numeric exact match against the
/// reference when one is given.
pub fn eval_open(
    dataset: &[OpenExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    contrast: &ContrastConfig,
    decode: &DecodeConfig,
    workers: usize,
) -> Result<OpenReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let items = with_workers(workers, || {
        dataset
            .par_iter()
            .map(|ex| {
                let prompt = tokenizer.encode(&ex.prompt)?;
                let out = match (model, &contrast.strategy) {
                    (EvalModel::Pair(pair), Strategy::Cd) => {
                        cd_generate(pair, tokenizer, contrast.alpha, decode, &prompt)?
                    }
                    (EvalModel::Pair(pair), _) => generate(pair.expert, tokenizer, contrast, decode, &prompt)?,
                    (EvalModel::Single(m), _) => generate(m, tokenizer, contrast, decode, &prompt)?,
                };
                let answer = extract_numeric_answer(&out.text);
                let reference = ex.reference.as_deref().and_then(extract_numeric_answer);
                let correct = reference.map(|r| answer.as_deref().is_some_and(|a| same_number(a, &r)));
                Ok(OpenItem {
                    id: ex.id.clone(),
                    repeated_bigram_rate: repeated_bigram_rate(&out.tokens),
                    tokens: out.tokens.len(),
                    text: out.text,
                    answer,
                    correct,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()
    })??;
    let graded: Vec<bool> = items.iter().filter_map(|i| i.correct).collect();
    let accuracy =
        (!graded.is_empty()).then(|| graded.iter().filter(|&&c| c).count() as f64 / graded.len() as f64);
    let repeated_bigram_rate = items.iter().map(|i| i.repeated_bigram_rate).sum::<f64>() / items.len() as f64;
    Ok(OpenReport { items, accuracy, repeated_bigram_rate })
}
