use std::ops::Deref;

use super::ModelError;

/// Tolerance used when accepting externally supplied probability vectors.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    /// Wrap a probability vector, checking that it is non-negative and sums
    /// to one within [`NORMALIZATION_TOLERANCE`].
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, ModelError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
            || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE
        {
            return Err(ModelError::Unnormalized(sum));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability, ties to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0).expect("distribution is never empty")
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Deref for TokenDistribution {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// First index holding the maximum of the finite-or-infinite entries; NaN is skipped.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

fn max_finite(logits: &[f64]) -> Result<f64, ModelError> {
    let m = logits
        .iter()
        .copied()
        .filter(|v| *v > f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return Err(ModelError::AllMasked);
    }
    Ok(m)
}

/// Max-subtracted softmax. `-inf` entries map to probability zero.
pub fn softmax(logits: &[f64]) -> Result<TokenDistribution, ModelError> {
    let m = max_finite(logits)?;
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(TokenDistribution(out))
}

/// `log(softmax(logits))` computed as `v - max - ln(sum(exp(v - max)))`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, ModelError> {
    let m = max_finite(logits)?;
    let lse = logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&v| v - m - lse).collect())
}
