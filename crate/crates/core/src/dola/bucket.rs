use serde::{Deserialize, Serialize};

use super::DolaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BucketSource {
    #[default]
    Auto,
    Explicit,
}

/// Candidate premature layers: even, strictly increasing, below `N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateBucket {
    pub id: usize,
    pub layers: Vec<usize>,
    #[serde(default)]
    pub source: BucketSource,
}

impl CandidateBucket {
    /// A user-supplied layer list. Order and duplicates are normalized away.
    pub fn explicit(
        layers: impl IntoIterator<Item = usize>,
        n_layers: usize,
        tied_embeddings: bool,
    ) -> Result<Self, DolaError> {
        let mut layers: Vec<usize> = layers.into_iter().collect();
        layers.sort_unstable();
        layers.dedup();
        let bucket = Self { id: 0, layers, source: BucketSource::Explicit };
        bucket.validate(n_layers, tied_embeddings)?;
        Ok(bucket)
    }

    pub fn validate(&self, n_layers: usize, tied_embeddings: bool) -> Result<(), DolaError> {
        if self.layers.is_empty() {
            return Err(DolaError::InvalidBucket("bucket has no layers".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DolaError::InvalidBucket("layers must be strictly increasing".into()));
        }
        for &l in &self.layers {
            if l >= n_layers {
                return Err(DolaError::InvalidBucket(format!(
                    "layer {l} is not below the mature layer {n_layers}"
                )));
            }
            if l % 2 != 0 {
                return Err(DolaError::InvalidBucket(format!("layer {l} is odd")));
            }
            if l == 0 && tied_embeddings {
                return Err(DolaError::InvalidBucket(
                    "layer 0 is excluded when embeddings are tied".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    /// Half-open layer range covered, for display.
    pub fn span(&self) -> Option<(usize, usize)> {
        Some((*self.layers.first()?, *self.layers.last()? + 1))
    }
}

/// Number of buckets: `max(2, ceil(N / 20))`, capped at 4.
pub fn bucket_count(n_layers: usize) -> usize {
    n_layers.div_ceil(20).clamp(2, 4)
}

/// Split `[0, N)` into contiguous equal spans and keep the even layers of
/// each. Layer 0 is dropped for tied embeddings. Spans left without any
/// candidate (possible for very shallow models) are omitted; ids stay
/// sequential over the buckets that remain.
pub fn buckets_for(n_layers: usize, tied_embeddings: bool) -> Vec<CandidateBucket> {
    let count = bucket_count(n_layers);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * n_layers / count;
        let end = (i + 1) * n_layers / count;
        let layers: Vec<usize> = (start..end)
            .filter(|l| l % 2 == 0)
            .filter(|&l| !(tied_embeddings && l == 0))
            .collect();
        if !layers.is_empty() {
            out.push(CandidateBucket { id: out.len(), layers, source: BucketSource::Auto });
        }
    }
    out
}

/// Spans (half-open) used by [`buckets_for`], before even-filtering.
pub fn bucket_spans(n_layers: usize) -> Vec<(usize, usize)> {
    let count = bucket_count(n_layers);
    (0..count)
        .map(|i| (i * n_layers / count, (i + 1) * n_layers / count))
        .collect()
}
