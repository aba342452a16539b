use serde::{Deserialize, Serialize};

use crate::dola::{CandidateBucket, ContrastConfig, Strategy};
use crate::tokenizer::Tokenizer;

use super::{metrics_from_scores, score_examples, EvalError, EvalModel, EvalOptions, McExample, ScoredExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMetric {
    Mc3,
    Accuracy,
}

/// A bucket's metric on fold 0 (even indices) and fold 1 (odd indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScores {
    pub bucket: usize,
    pub layers: Vec<usize>,
    pub fold_scores: [f64; 2],
}

impl BucketScores {
    fn mean(&self) -> f64 {
        (self.fold_scores[0] + self.fold_scores[1]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldChoice {
    pub fold: usize,
    pub chosen_bucket: usize,
    pub in_fold_score: f64,
    /// Score of the chosen bucket on the other fold.
    pub cross_fold_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoFoldSelection {
    pub folds: [FoldChoice; 2],
    pub final_bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub metric: ValidationMetric,
    pub fold_sizes: [usize; 2],
    pub buckets: Vec<BucketScores>,
    pub selection: TwoFoldSelection,
}

/// Pick a bucket per fold (ties to the lower id), then settle disagreement
/// by the higher mean over both folds, again tying to the lower id.
pub fn select_two_fold(table: &[BucketScores]) -> Result<TwoFoldSelection, EvalError> {
    if table.len() < 2 {
        return Err(EvalError::InvalidPlan("need at least two buckets".into()));
    }
    let mut rows: Vec<&BucketScores> = table.iter().collect();
    rows.sort_by_key(|b| b.bucket);
    let pick = |fold: usize| {
        let mut best = rows[0];
        for &r in &rows[1..] {
            if r.fold_scores[fold] > best.fold_scores[fold] {
                best = r;
            }
        }
        best
    };
    let chosen = [pick(0), pick(1)];
    let folds = [0, 1].map(|f| FoldChoice {
        fold: f,
        chosen_bucket: chosen[f].bucket,
        in_fold_score: chosen[f].fold_scores[f],
        cross_fold_score: chosen[f].fold_scores[1 - f],
    });
    let final_bucket = if chosen[0].bucket == chosen[1].bucket {
        chosen[0].bucket
    } else {
        let (lo, hi) = if chosen[0].bucket < chosen[1].bucket {
            (chosen[0], chosen[1])
        } else {
            (chosen[1], chosen[0])
        };
        if hi.mean() > lo.mean() {
            hi.bucket
        } else {
            lo.bucket
        }
    };
    Ok(TwoFoldSelection { folds, final_bucket })
}

fn fold_metric(examples: &[ScoredExample], fold: usize, metric: ValidationMetric) -> Result<f64, EvalError> {
    let part: Vec<ScoredExample> = examples.iter().skip(fold).step_by(2).cloned().collect();
    let m = metrics_from_scores(&part)?;
    match metric {
        ValidationMetric::Mc3 => Ok(m.mc3),
        ValidationMetric::Accuracy => m
            .accuracy
            .ok_or_else(|| EvalError::InvalidPlan(format!("fold {fold} has no single-true examples"))),
    }
}

/// Two-fold selection among `buckets`, splitting examples by index parity.
/// `base` supplies alpha and the post-softmax flag; its strategy is replaced
/// by dynamic selection over each bucket in turn.
pub fn two_fold_validate(
    dataset: &[McExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    buckets: &[CandidateBucket],
    base: &ContrastConfig,
    metric: ValidationMetric,
    options: EvalOptions,
) -> Result<ValidationReport, EvalError> {
    if dataset.len() < 2 {
        return Err(EvalError::InvalidPlan("need at least two examples".into()));
    }
    if buckets.len() < 2 {
        return Err(EvalError::InvalidPlan("need at least two buckets".into()));
    }
    let mut table = Vec::with_capacity(buckets.len());
    for bucket in buckets {
        let mut config = base.clone();
        config.strategy = Strategy::DolaDynamic { bucket: bucket.clone() };
        let scored = score_examples(dataset, model, tokenizer, &config, options)?;
        table.push(BucketScores {
            bucket: bucket.id,
            layers: bucket.layers.clone(),
            fold_scores: [fold_metric(&scored, 0, metric)?, fold_metric(&scored, 1, metric)?],
        });
    }
    let selection = select_two_fold(&table)?;
    Ok(ValidationReport {
        metric,
        fold_sizes: [dataset.len().div_ceil(2), dataset.len() / 2],
        buckets: table,
        selection,
    })
}
