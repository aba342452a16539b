use std::collections::BTreeMap;

use crate::model::{TokenDistribution, NORMALIZATION_TOLERANCE};

use super::DolaError;

/// `p * ln(p / m)` with the `0 * ln 0 = 0` convention.
fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

fn check_normalized(x: &[f64]) -> Result<(), DolaError> {
    let s: f64 = x.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DolaError::Unnormalized(s));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats: `0.5 KL(p||m) + 0.5 KL(q||m)` with
/// `m = (p + q) / 2`. Result lies in `[0, ln 2]`.
///
/// The per-element term is symmetric in `(p, q)` and summed in index order,
/// so `jsd(p, q)` and `jsd(q, p)` agree bit for bit.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, DolaError> {
    if p.len() != q.len() {
        return Err(DolaError::LengthMismatch(p.len(), q.len()));
    }
    check_normalized(p)?;
    check_normalized(q)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += kl_term(a, m) + kl_term(b, m);
    }
    Ok((0.5 * total).clamp(0.0, std::f64::consts::LN_2))
}

/// Pick the candidate whose distribution diverges most from the mature one.
/// Ties go to the smallest layer index.
pub fn select_premature(
    mature: &TokenDistribution,
    candidates: &BTreeMap<usize, TokenDistribution>,
) -> Result<(usize, BTreeMap<usize, f64>), DolaError> {
    let mut best: Option<(usize, f64)> = None;
    let mut by_layer = BTreeMap::new();
    for (&layer, q) in candidates {
        let d = jsd(mature, q)?;
        by_layer.insert(layer, d);
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((layer, d));
        }
    }
    let (layer, _) = best.ok_or(DolaError::EmptyCandidates)?;
    Ok((layer, by_layer))
}
