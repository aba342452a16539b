#![allow(dead_code)]

use dola_core::model::{Activation, Model, ModelConfig, NormKind, Positional};
use dola_core::synthetic::{identity_model, random_model, toy_config};

pub fn toy() -> Model {
    random_model(toy_config(), 7).unwrap()
}

pub fn toy_identity() -> Model {
    identity_model(toy_config(), 7).unwrap()
}

pub fn small_config(n_layers: usize) -> ModelConfig {
    ModelConfig { n_layers, max_seq_len: 64, ..toy_config() }
}

pub fn gpt2_like_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: 4,
        d_ff: 64,
        vocab_size: 258,
        max_seq_len: 64,
        norm_kind: NormKind::LayerNorm,
        norm_eps: 1e-5,
        activation: Activation::Gelu,
        positional: Positional::LearnedAbsolute,
        rotary_base: 10_000.0,
        tied_embeddings: true,
        exit_norm: true,
    }
}

fn tensor(model: &Model, name: &str) -> Vec<f64> {
    model.weights().get(name).unwrap_or_else(|| panic!("missing {name}")).data.iter().map(|&v| f64::from(v)).collect()
}

fn opt_tensor(model: &Model, name: &str) -> Option<Vec<f64>> {
    model.weights().get(name).map(|t| t.data.iter().map(|&v| f64::from(v)).collect())
}

fn lin(model: &Model, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = tensor(model, &format!("{prefix}.weight"));
    let b = opt_tensor(model, &format!("{prefix}.bias"));
    let cols = x.len();
    let rows = w.len() / cols;
    (0..rows)
        .map(|r| {
            let s: f64 = (0..cols).map(|c| w[r * cols + c] * x[c]).sum();
            s + b.as_ref().map_or(0.0, |b| b[r])
        })
        .collect()
}

fn norm(model: &Model, prefix: &str, x: &[f64]) -> Vec<f64> {
    let cfg = model.config();
    let eps = f64::from(cfg.norm_eps);
    let g = tensor(model, &format!("{prefix}.weight"));
    let d = x.len() as f64;
    match cfg.norm_kind {
        NormKind::RmsNorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            x.iter().zip(&g).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
        }
        NormKind::LayerNorm => {
            let b = opt_tensor(model, &format!("{prefix}.bias")).unwrap_or(vec![0.0; x.len()]);
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i]).collect()
        }
    }
}

/// Straightforward f64 re-derivation of the residual stream for a
/// single-token input at position 0, where attention reduces to the value
/// projection of that token.
pub fn oracle_single_token_taps(model: &Model, token: u32) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let group = cfg.n_heads / cfg.n_kv_heads;
    let emb = tensor(model, "tok_embeddings.weight");
    let t = token as usize;
    let mut x: Vec<f64> = emb[t * d..(t + 1) * d].to_vec();
    if cfg.positional == Positional::LearnedAbsolute {
        let pos = tensor(model, "pos_embeddings.weight");
        for i in 0..d {
            x[i] += pos[i];
        }
    }
    let mut taps = vec![x.clone()];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let h = norm(model, &p("attn_norm"), &x);
        let v = lin(model, &p("attn.v"), &h);
        let mut attn = vec![0.0; d];
        for head in 0..cfg.n_heads {
            let kvh = head / group;
            attn[head * hd..(head + 1) * hd].copy_from_slice(&v[kvh * hd..(kvh + 1) * hd]);
        }
        let o = lin(model, &p("attn.o"), &attn);
        for i in 0..d {
            x[i] += o[i];
        }
        let h = norm(model, &p("ffn_norm"), &x);
        let up = lin(model, &p("ffn.up"), &h);
        let act: Vec<f64> = match cfg.activation {
            Activation::SiluGated => {
                let g = lin(model, &p("ffn.gate"), &h);
                up.iter().zip(&g).map(|(u, g)| u * g / (1.0 + (-g).exp())).collect()
            }
            Activation::Gelu => up
                .iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect(),
        };
        let down = lin(model, &p("ffn.down"), &act);
        for i in 0..d {
            x[i] += down[i];
        }
        taps.push(x.clone());
    }
    taps
}

/// Final norm and head applied to an f64 residual vector.
pub fn oracle_project(model: &Model, h: &[f64]) -> Vec<f64> {
    let cfg = model.config();
    let head = if cfg.tied_embeddings { "tok_embeddings.weight" } else { "output.weight" };
    let w = tensor(model, head);
    let n = norm(model, "norm", h);
    let d = cfg.d_model;
    (0..cfg.vocab_size).map(|r| (0..d).map(|c| w[r * d + c] * n[c]).sum()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}
