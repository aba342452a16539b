//! Contrast configuration, serializable as a flat JSON object:
//!
//! ```json
//! {
//!   "strategy": "dola-dynamic",
//!   "bucket": { "id": 1, "layers": [16, 18, 20], "source": "auto" },
//!   "alpha": 0.1,
//!   "mask": "-inf",
//!   "post_softmax": true
//! }
//! ```
//!
//! `strategy` is one of `vanilla`, `dola-dynamic` (needs `bucket`),
//! `dola-static` (needs `static_layer`), `dola-random` (needs `bucket`,
//! optional `rng_seed`, default 0) or `cd`. Defaults: `alpha` 0.1, `mask`
//! `"-inf"`, `post_softmax` true.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CandidateBucket, DolaError};

pub const DEFAULT_ALPHA: f64 = 0.1;
/// Finite mask used for likelihood scoring.
pub const SCORING_MASK: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    Vanilla,
    DolaDynamic {
        bucket: CandidateBucket,
    },
    DolaStatic {
        static_layer: usize,
    },
    DolaRandom {
        bucket: CandidateBucket,
        #[serde(default)]
        rng_seed: u64,
    },
    /// Two-model contrast; driven by `decode::cd_generate`.
    Cd,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::DolaDynamic { .. } => "dola-dynamic",
            Strategy::DolaStatic { .. } => "dola-static",
            Strategy::DolaRandom { .. } => "dola-random",
            Strategy::Cd => "cd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MaskValue {
    #[default]
    #[serde(rename = "-inf")]
    NegInfinity,
    #[serde(rename = "-1000")]
    Finite,
}

impl MaskValue {
    pub fn value(self) -> f64 {
        match self {
            MaskValue::NegInfinity => f64::NEG_INFINITY,
            MaskValue::Finite => SCORING_MASK,
        }
    }

    pub fn is_masked(self, score: f64) -> bool {
        score == self.value()
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    #[serde(flatten)]
    pub strategy: Strategy,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub mask: MaskValue,
    #[serde(default = "default_true")]
    pub post_softmax: bool,
}

impl ContrastConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, alpha: DEFAULT_ALPHA, mask: MaskValue::NegInfinity, post_softmax: true }
    }

    pub fn vanilla() -> Self {
        Self::new(Strategy::Vanilla)
    }

    pub fn dynamic(bucket: CandidateBucket) -> Self {
        Self::new(Strategy::DolaDynamic { bucket })
    }

    pub fn fixed_layer(static_layer: usize) -> Self {
        Self::new(Strategy::DolaStatic { static_layer })
    }

    pub fn random(bucket: CandidateBucket, rng_seed: u64) -> Self {
        Self::new(Strategy::DolaRandom { bucket, rng_seed })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_mask(mut self, mask: MaskValue) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_post_softmax(mut self, on: bool) -> Self {
        self.post_softmax = on;
        self
    }

    pub fn bucket(&self) -> Option<&CandidateBucket> {
        match &self.strategy {
            Strategy::DolaDynamic { bucket } | Strategy::DolaRandom { bucket, .. } => Some(bucket),
            _ => None,
        }
    }

    /// Early layers this configuration reads, excluding the mature layer.
    pub fn premature_taps(&self) -> BTreeSet<usize> {
        match &self.strategy {
            Strategy::DolaDynamic { bucket } | Strategy::DolaRandom { bucket, .. } => {
                bucket.layers.iter().copied().collect()
            }
            Strategy::DolaStatic { static_layer } => BTreeSet::from([*static_layer]),
            Strategy::Vanilla | Strategy::Cd => BTreeSet::new(),
        }
    }

    pub fn validate(&self, n_layers: usize, tied_embeddings: bool) -> Result<(), DolaError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DolaError::InvalidConfig(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        match &self.strategy {
            Strategy::DolaDynamic { bucket } | Strategy::DolaRandom { bucket, .. } => {
                bucket.validate(n_layers, tied_embeddings)
            }
            Strategy::DolaStatic { static_layer } => {
                if *static_layer >= n_layers {
                    return Err(DolaError::InvalidConfig(format!(
                        "static layer {static_layer} must be below {n_layers}"
                    )));
                }
                if *static_layer == 0 && tied_embeddings {
                    return Err(DolaError::InvalidConfig(
                        "layer 0 is excluded when embeddings are tied".into(),
                    ));
                }
                Ok(())
            }
            Strategy::Vanilla | Strategy::Cd => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_flat_layout() {
        let c: ContrastConfig = serde_json::from_str(r#"{"strategy":"vanilla"}"#).unwrap();
        assert_eq!(c, ContrastConfig::vanilla());

        let json = r#"{"strategy":"dola-dynamic","bucket":{"id":1,"layers":[4,6]},
                       "mask":"-1000","post_softmax":false}"#;
        let c: ContrastConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.mask, MaskValue::Finite);
        assert!(!c.post_softmax);
        assert_eq!(c.bucket().unwrap().layers, vec![4, 6]);

        let back: ContrastConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn strategy_fields_are_required() {
        assert!(serde_json::from_str::<ContrastConfig>(r#"{"strategy":"dola-static"}"#).is_err());
        assert!(serde_json::from_str::<ContrastConfig>(r#"{"strategy":"dola-dynamic"}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(ContrastConfig::fixed_layer(8).validate(8, false).is_err());
        assert!(ContrastConfig::fixed_layer(0).validate(8, true).is_err());
        assert!(ContrastConfig::vanilla().with_alpha(1.0).validate(8, false).is_err());
        assert!(ContrastConfig::vanilla().with_alpha(0.0).validate(8, false).is_err());
        ContrastConfig::fixed_layer(3).validate(8, false).unwrap();
    }

    #[test]
    fn mask_values() {
        assert_eq!(MaskValue::Finite.value(), -1000.0);
        assert_eq!(MaskValue::NegInfinity.value(), f64::NEG_INFINITY);
        assert_eq!(serde_json::to_string(&MaskValue::Finite).unwrap(), "\"-1000\"");
    }
}
