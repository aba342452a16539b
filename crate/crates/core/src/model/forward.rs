//! Incremental forward pass and early-exit projection.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{Activation, KvCache, Linear, Model, ModelError, Norm, NormKind, Positional};

/// Residual stream at the final input position for every tap `0..=N`.
/// Tap 0 is the embedding output, tap `j` the output of block `j - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(Vec<Vec<f32>>);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tap(&self, j: usize) -> &[f32] {
        &self.0[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.0.iter().map(Vec::as_slice)
    }
}

/// Logit vectors keyed by tap index. Always holds the mature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyExitLogits {
    mature: usize,
    logits: BTreeMap<usize, Vec<f64>>,
}

impl EarlyExitLogits {
    /// Assemble from precomputed vectors. `logits` must contain `mature`.
    pub fn from_map(mature: usize, logits: BTreeMap<usize, Vec<f64>>) -> Result<Self, ModelError> {
        if !logits.contains_key(&mature) {
            return Err(ModelError::TapOutOfRange { tap: mature, n_layers: mature });
        }
        if let Some(&tap) = logits.keys().find(|&&k| k > mature) {
            return Err(ModelError::TapOutOfRange { tap, n_layers: mature });
        }
        Ok(Self { mature, logits })
    }

    pub fn mature_layer(&self) -> usize {
        self.mature
    }

    pub fn mature(&self) -> &[f64] {
        &self.logits[&self.mature]
    }

    pub fn get(&self, layer: usize) -> Option<&[f64]> {
        self.logits.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.logits.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.logits.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut Vec<f64>> {
        self.logits.get_mut(&layer)
    }

    pub fn into_map(self) -> BTreeMap<usize, Vec<f64>> {
        self.logits
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

/// Dot product with eight independent accumulators, combined in a fixed order.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out = W x (+ b)` for a row-major `[rows, cols]` weight.
fn matvec(w: &[f32], bias: Option<&[f32]>, x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let row = |r: usize| {
        let v = dot(&w[r * cols..(r + 1) * cols], x);
        match bias {
            Some(b) => v + b[r],
            None => v,
        }
    };
    if rows * cols >= PAR_THRESHOLD {
        (0..rows).into_par_iter().map(row).collect()
    } else {
        (0..rows).map(row).collect()
    }
}

fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotate-half rotary embedding applied in place to each head of `x`.
fn apply_rotary(x: &mut [f32], head_dim: usize, pos: usize, base: f32) {
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let freq = base.powf(-((2 * i) as f32) / head_dim as f32);
            let (sin, cos) = (pos as f32 * freq).sin_cos();
            let a = head[i];
            let b = head[i + half];
            head[i] = a * cos - b * sin;
            head[i + half] = b * cos + a * sin;
        }
    }
}

impl Model {
    fn linear(&self, l: &Linear, x: &[f32]) -> Vec<f32> {
        matvec(self.t(l.w), l.b.map(|b| self.t(b)), x, l.rows, l.cols)
    }

    fn norm(&self, n: &Norm, x: &[f32]) -> Vec<f32> {
        let eps = self.config.norm_eps;
        let d = x.len() as f32;
        let w = self.t(n.w);
        match self.config.norm_kind {
            NormKind::RmsNorm => {
                let ms = x.iter().map(|v| v * v).sum::<f32>() / d;
                let scale = 1.0 / (ms + eps).sqrt();
                x.iter().zip(w).map(|(v, g)| v * scale * g).collect()
            }
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f32>() / d;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
                let scale = 1.0 / (var + eps).sqrt();
                let b = n.b.map(|b| self.t(b));
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) * scale * w[i] + b.map_or(0.0, |b| b[i]))
                    .collect()
            }
        }
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }

    /// Run one position, returning the residual stream at every tap.
    fn step_token(&self, cache: &mut KvCache, token: u32) -> Vec<Vec<f32>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let group = cfg.n_heads / cfg.n_kv_heads;
        let pos = cache.len();
        let layout = self.layout();

        let tok = token as usize;
        let mut x = self.t(layout.embed)[tok * d..(tok + 1) * d].to_vec();
        if let Some(p) = layout.pos {
            for (xi, pi) in x.iter_mut().zip(&self.t(p)[pos * d..(pos + 1) * d]) {
                *xi += pi;
            }
        }
        let mut taps = Vec::with_capacity(cfg.n_layers + 1);
        taps.push(x.clone());

        let scale = 1.0 / (hd as f32).sqrt();
        for (li, block) in layout.blocks.iter().enumerate() {
            let h = self.norm(&block.attn_norm, &x);
            let mut q = self.linear(&block.q, &h);
            let mut k = self.linear(&block.k, &h);
            let v = self.linear(&block.v, &h);
            if cfg.positional == Positional::Rotary {
                apply_rotary(&mut q, hd, pos, cfg.rotary_base);
                apply_rotary(&mut k, hd, pos, cfg.rotary_base);
            }
            cache.write(li, pos, &k, &v);

            let mut attn = vec![0f32; d];
            let mut scores = vec![0f32; pos + 1];
            for head in 0..cfg.n_heads {
                let kvh = head / group;
                let qh = &q[head * hd..(head + 1) * hd];
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &cache.key(li, t)[kvh * hd..(kvh + 1) * hd]) * scale;
                }
                let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0f32;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                let out = &mut attn[head * hd..(head + 1) * hd];
                for (t, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let vt = &cache.value(li, t)[kvh * hd..(kvh + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(vt) {
                        *o += w * vv;
                    }
                }
            }
            let proj = self.linear(&block.o, &attn);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            let h = self.norm(&block.ffn_norm, &x);
            let mut up = self.linear(&block.up, &h);
            match (cfg.activation, &block.gate) {
                (Activation::SiluGated, Some(gate)) => {
                    let g = self.linear(gate, &h);
                    for (u, g) in up.iter_mut().zip(&g) {
                        *u *= silu(*g);
                    }
                }
                _ => {
                    for u in up.iter_mut() {
                        *u = gelu(*u);
                    }
                }
            }
            let down = self.linear(&block.down, &up);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }
            taps.push(x.clone());
        }
        cache.advance();
        taps
    }

    /// Feed `tokens` after the cached prefix and return the residual stream
    /// at the last of them for every tap `0..=N`.
    pub fn forward_step(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<HiddenStates, ModelError> {
        let needed = cache.len() + tokens.len();
        if needed > self.config.max_seq_len {
            return Err(ModelError::ContextOverflow { needed, max: self.config.max_seq_len });
        }
        if tokens.is_empty() {
            return Err(ModelError::Malformed("forward_step needs at least one token".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(ModelError::TokenOutOfRange { token, vocab });
        }
        let mut taps = Vec::new();
        for &t in tokens {
            taps = self.step_token(cache, t);
        }
        Ok(HiddenStates(taps))
    }

    /// Final norm then the output head.
    pub fn project(&self, hidden: &[f32]) -> Vec<f64> {
        self.project_with(hidden, true)
    }

    fn project_with(&self, hidden: &[f32], norm: bool) -> Vec<f64> {
        let layout = self.layout();
        let normed;
        let h = if norm {
            normed = self.norm(&layout.final_norm, hidden);
            &normed
        } else {
            hidden
        };
        matvec(self.t(layout.head), None, h, self.config.vocab_size, self.config.d_model)
            .into_iter()
            .map(f64::from)
            .collect()
    }

    /// The valid tap set check without projecting anything.
    pub fn check_taps(&self, taps: impl IntoIterator<Item = usize>) -> Result<(), ModelError> {
        let n = self.config.n_layers;
        for tap in taps {
            if tap > n {
                return Err(ModelError::TapOutOfRange { tap, n_layers: n });
            }
            if tap == 0 && self.config.tied_embeddings {
                return Err(ModelError::TiedEmbeddingTap);
            }
        }
        Ok(())
    }

    /// Project each requested tap plus the mature layer `N` to logits.
    pub fn early_exit_logits(
        &self,
        hidden: &HiddenStates,
        taps: impl IntoIterator<Item = usize>,
    ) -> Result<EarlyExitLogits, ModelError> {
        let n = self.config.n_layers;
        let mut set: BTreeSet<usize> = taps.into_iter().collect();
        self.check_taps(set.iter().copied())?;
        set.insert(n);
        let mut logits = BTreeMap::new();
        for j in set {
            // The mature layer is always normalized; `exit_norm = false`
            // only changes the intermediate taps.
            let norm = j == n || self.config.exit_norm;
            logits.insert(j, self.project_with(hidden.tap(j), norm));
        }
        Ok(EarlyExitLogits { mature: n, logits })
    }
}
