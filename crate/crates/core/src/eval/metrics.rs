use serde::{Deserialize, Serialize};

use super::EvalError;

/// Choice scores for one example, aligned with its truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub is_true: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoredExample {
    fn check(&self) -> Result<(), EvalError> {
        let malformed = |reason: &str| EvalError::MalformedExample { id: self.id.clone(), reason: reason.into() };
        if self.is_true.len() != self.scores.len() {
            return Err(malformed("labels and scores differ in length"));
        }
        if self.scores.len() < 2 {
            return Err(malformed("fewer than two choices"));
        }
        let trues = self.is_true.iter().filter(|&&t| t).count();
        if trues == 0 || trues == self.is_true.len() {
            return Err(malformed("needs at least one true and one false choice"));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(malformed("non-finite choice score"));
        }
        Ok(())
    }

    /// Index of the highest score, lowest index on ties.
    fn best(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn mc1(&self) -> f64 {
        f64::from(u8::from(self.is_true[self.best()]))
    }

    /// Probability mass on true choices after normalizing exp(score).
    pub fn mc2(&self) -> f64 {
        let max = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&t, &s) in self.is_true.iter().zip(&self.scores) {
            let e = (s - max).exp();
            den += e;
            if t {
                num += e;
            }
        }
        num / den
    }

    /// Fraction of true choices scored strictly above every false choice.
    pub fn mc3(&self) -> f64 {
        let max_false = self
            .is_true
            .iter()
            .zip(&self.scores)
            .filter(|(&t, _)| !t)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let (above, total) = self
            .is_true
            .iter()
            .zip(&self.scores)
            .filter(|(&t, _)| t)
            .fold((0usize, 0usize), |(a, n), (_, &s)| (a + usize::from(s > max_false), n + 1));
        above as f64 / total as f64
    }

    pub fn single_true(&self) -> bool {
        self.is_true.iter().filter(|&&t| t).count() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    /// MC1 over the single-true examples; `None` when there are none.
    pub accuracy: Option<f64>,
    pub n: usize,
}

/// Sum after sorting, so the result does not depend on input order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Aggregate per-example scores. Order-invariant bit for bit.
pub fn metrics_from_scores(examples: &[ScoredExample]) -> Result<McMetrics, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    for ex in examples {
        ex.check()?;
    }
    let n = examples.len() as f64;
    let mean_of = |f: fn(&ScoredExample) -> f64| sorted_sum(examples.iter().map(f).collect()) / n;
    let single: Vec<f64> = examples.iter().filter(|e| e.single_true()).map(ScoredExample::mc1).collect();
    let k = single.len();
    Ok(McMetrics {
        mc1: mean_of(ScoredExample::mc1),
        mc2: mean_of(ScoredExample::mc2),
        mc3: mean_of(ScoredExample::mc3),
        accuracy: (k > 0).then(|| sorted_sum(single) / k as f64),
        n: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(is_true: &[bool], scores: &[f64]) -> ScoredExample {
        ScoredExample { id: "x".into(), is_true: is_true.to_vec(), scores: scores.to_vec() }
    }

    #[test]
    fn separable_case_is_perfect() {
        let m = metrics_from_scores(&[ex(&[true, false, false], &[0.0, -500.0, -600.0])]).unwrap();
        assert_eq!((m.mc1, m.mc3, m.accuracy), (1.0, 1.0, Some(1.0)));
        assert!((m.mc2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_ranked_truth_misses_mc1() {
        let m = metrics_from_scores(&[ex(&[false, true, false, false], &[-1.0, -2.0, -3.0, -4.0])]).unwrap();
        assert_eq!(m.mc1, 0.0);
        assert_eq!(m.mc3, 0.0);
    }

    #[test]
    fn mc3_counts_trues_above_all_falses() {
        let e = ex(&[true, true, false, false], &[-1.0, -3.0, -2.0, -4.0]);
        assert_eq!(e.mc3(), 0.5);
        let m = metrics_from_scores(&[e]).unwrap();
        assert_eq!(m.accuracy, None);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(ex(&[false, true], &[-1.0, -1.0]).mc1(), 0.0);
        assert_eq!(ex(&[true, false], &[-1.0, -1.0]).mc1(), 1.0);
        assert_eq!(ex(&[true, false], &[-1.0, -1.0]).mc3(), 0.0);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(metrics_from_scores(&[]).is_err());
        assert!(metrics_from_scores(&[ex(&[true, true], &[0.0, 1.0])]).is_err());
        assert!(metrics_from_scores(&[ex(&[true, false], &[0.0])]).is_err());
        assert!(metrics_from_scores(&[ex(&[true, false], &[0.0, f64::NAN])]).is_err());
    }
}
