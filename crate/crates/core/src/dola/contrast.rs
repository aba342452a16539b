/// Floor applied to premature-layer probabilities inside `V_head` before the log.
pub const PREMATURE_FLOOR: f64 = 1e-12;

/// Adaptive plausibility constraint: ids whose mature probability is at
/// least `alpha` times the mature maximum. Never empty for a normalized input.
pub fn apc_mask(mature: &[f64], alpha: f64) -> Vec<u32> {
    let max = mature.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = alpha * max;
    mature
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i as u32)
        .collect()
}

/// `ln q_mature(x) - ln q_premature(x)` on `v_head`, `mask` elsewhere.
pub fn contrast(mature: &[f64], premature: &[f64], v_head: &[u32], mask: f64) -> Vec<f64> {
    let mut scores = vec![mask; mature.len()];
    for &x in v_head {
        let x = x as usize;
        scores[x] = mature[x].ln() - premature[x].max(PREMATURE_FLOOR).ln();
    }
    scores
}
