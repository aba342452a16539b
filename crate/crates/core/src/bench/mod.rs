//! Forced-length decoding benchmarks: per-token latency, throughput and heap
//! overhead, vanilla against any contrast strategy.
//!
//! Heap figures come from [`TrackingAllocator`] and are an approximation of
//! working memory: they count live Rust heap bytes, not resident pages.

mod alloc;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{generate, DecodeConfig, DecodeError};
use crate::dola::ContrastConfig;
use crate::model::Model;
use crate::tokenizer::Tokenizer;

pub use alloc::{current_bytes, peak_bytes, reset_peak, tracking_active, TrackingAllocator};

pub const MIN_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench options: {0}")]
    InvalidOptions(String),
    #[error("forced decode emitted {got} tokens instead of {expected}")]
    ProtocolViolation { expected: usize, got: usize },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    /// Compute threads for the measurement, recorded in the report.
    pub threads: usize,
    /// Applied identically to every strategy measured.
    pub repetition_penalty: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { runs: MIN_RUNS, warmup: 1, threads: 1, repetition_penalty: 1.2 }
    }
}

impl BenchOptions {
    fn validate(&self) -> Result<(), BenchError> {
        if self.runs < MIN_RUNS {
            return Err(BenchError::InvalidOptions(format!("runs must be >= {MIN_RUNS}")));
        }
        if self.warmup < 1 {
            return Err(BenchError::InvalidOptions("at least one warmup run is required".into()));
        }
        if self.threads < 1 {
            return Err(BenchError::InvalidOptions("threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear-interpolated percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: String,
    pub contrast: ContrastConfig,
    pub forced_new_tokens: usize,
    pub prompts: usize,
    pub mean_input_len: f64,
    pub runs: usize,
    pub threads: usize,
    pub ms_per_token: LatencyStats,
    /// Median over runs of each run's tokens per second.
    pub tokens_per_second: f64,
    pub run_ms_per_token: Vec<f64>,
    pub ratio_vs_baseline: Option<f64>,
    pub memory_tracked: bool,
    pub bytes_before_forward: usize,
    pub peak_bytes_during_forward: usize,
    pub memory_overhead_bytes: usize,
    pub memory_overhead_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub baseline: BenchReport,
    pub candidate: BenchReport,
    /// candidate / baseline median ms per token.
    pub ratio: f64,
}

struct Accum {
    run_ms: Vec<f64>,
    run_tps: Vec<f64>,
    before: usize,
    peak: usize,
}

impl Accum {
    fn new() -> Self {
        Self { run_ms: Vec::new(), run_tps: Vec::new(), before: 0, peak: 0 }
    }
}

struct Session<'a> {
    model: &'a Model,
    tokenizer: &'a dyn Tokenizer,
    prompts: &'a [Vec<u32>],
    decode: DecodeConfig,
}

impl Session<'_> {
    /// One pass over every prompt. Returns elapsed seconds, tokens emitted,
    /// heap bytes before, and the heap peak during the pass.
    fn run(&self, contrast: &ContrastConfig) -> Result<(f64, usize, usize, usize), BenchError> {
        let before = current_bytes();
        reset_peak();
        let start = Instant::now();
        let mut tokens = 0;
        for p in self.prompts {
            let out = generate(self.model, self.tokenizer, contrast, &self.decode, p)?;
            if out.tokens.len() != self.decode.max_new_tokens {
                return Err(BenchError::ProtocolViolation {
                    expected: self.decode.max_new_tokens,
                    got: out.tokens.len(),
                });
            }
            tokens += out.tokens.len();
        }
        let elapsed = start.elapsed().as_secs_f64();
        Ok((elapsed, tokens, before, peak_bytes()))
    }

    fn record(&self, contrast: &ContrastConfig, acc: &mut Accum) -> Result<(), BenchError> {
        let (secs, tokens, before, peak) = self.run(contrast)?;
        acc.run_ms.push(secs * 1000.0 / tokens as f64);
        acc.run_tps.push(tokens as f64 / secs);
        if acc.run_ms.len() == 1 {
            acc.before = before;
        }
        acc.peak = acc.peak.max(peak);
        Ok(())
    }

    fn report(&self, contrast: &ContrastConfig, acc: Accum, threads: usize) -> BenchReport {
        let ms = sorted(&acc.run_ms);
        let tps = sorted(&acc.run_tps);
        let overhead = acc.peak.saturating_sub(acc.before);
        BenchReport {
            strategy: contrast.strategy.name().to_string(),
            contrast: contrast.clone(),
            forced_new_tokens: self.decode.max_new_tokens,
            prompts: self.prompts.len(),
            mean_input_len: self.prompts.iter().map(Vec::len).sum::<usize>() as f64 / self.prompts.len() as f64,
            runs: acc.run_ms.len(),
            threads,
            ms_per_token: LatencyStats {
                median: percentile(&ms, 0.5),
                p10: percentile(&ms, 0.1),
                p90: percentile(&ms, 0.9),
            },
            tokens_per_second: percentile(&tps, 0.5),
            run_ms_per_token: acc.run_ms,
            ratio_vs_baseline: None,
            memory_tracked: tracking_active(),
            bytes_before_forward: acc.before,
            peak_bytes_during_forward: acc.peak,
            memory_overhead_bytes: overhead,
            memory_overhead_pct: if acc.before == 0 { 0.0 } else { 100.0 * overhead as f64 / acc.before as f64 },
        }
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn session<'a>(
    model: &'a Model,
    tokenizer: &'a dyn Tokenizer,
    prompts: &'a [Vec<u32>],
    forced_new_tokens: usize,
    options: &BenchOptions,
) -> Result<Session<'a>, BenchError> {
    options.validate()?;
    if forced_new_tokens < 1 {
        return Err(BenchError::InvalidOptions("forced_new_tokens must be >= 1".into()));
    }
    if prompts.is_empty() {
        return Err(BenchError::InvalidOptions("no prompts".into()));
    }
    let decode = DecodeConfig::greedy(forced_new_tokens).with_penalty(options.repetition_penalty);
    Ok(Session { model, tokenizer, prompts, decode })
}

/// Decode exactly `forced_new_tokens` for every prompt, with no stopping
/// criteria, `options.runs` times after warmup.
pub fn measure_decode(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    contrast: &ContrastConfig,
    prompts: &[Vec<u32>],
    forced_new_tokens: usize,
    options: BenchOptions,
) -> Result<BenchReport, BenchError> {
    let s = session(model, tokenizer, prompts, forced_new_tokens, &options)?;
    in_pool(options.threads, || {
        for _ in 0..options.warmup {
            s.run(contrast)?;
        }
        let mut acc = Accum::new();
        for _ in 0..options.runs {
            s.record(contrast, &mut acc)?;
        }
        Ok(s.report(contrast, acc, options.threads))
    })?
}

/// Measure baseline and candidate with alternating runs so that drift in
/// machine load hits both equally.
pub fn compare_decode(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    baseline: &ContrastConfig,
    candidate: &ContrastConfig,
    prompts: &[Vec<u32>],
    forced_new_tokens: usize,
    options: BenchOptions,
) -> Result<BenchComparison, BenchError> {
    let s = session(model, tokenizer, prompts, forced_new_tokens, &options)?;
    in_pool(options.threads, || {
        for _ in 0..options.warmup {
            s.run(baseline)?;
            s.run(candidate)?;
        }
        let (mut a, mut b) = (Accum::new(), Accum::new());
        for i in 0..options.runs {
            if i % 2 == 0 {
                s.record(baseline, &mut a)?;
                s.record(candidate, &mut b)?;
            } else {
                s.record(candidate, &mut b)?;
                s.record(baseline, &mut a)?;
            }
        }
        let base = s.report(baseline, a, options.threads);
        let mut cand = s.report(candidate, b, options.threads);
        let ratio = cand.ms_per_token.median / base.ms_per_token.median;
        cand.ratio_vs_baseline = Some(ratio);
        Ok(BenchComparison { baseline: base, candidate: cand, ratio })
    })?
}

/// Relative gap between reported throughput and `1000 / median ms`.
pub fn consistency_gap(report: &BenchReport) -> f64 {
    let implied = 1000.0 / report.ms_per_token.median;
    (report.tokens_per_second - implied).abs() / implied
}

/// Markdown table: latency, throughput and heap figures per report.
pub fn markdown_table(reports: &[&BenchReport]) -> String {
    let mut s = String::from(
        "| strategy | ms/token (median) | p10 | p90 | tokens/s | ratio | heap before (MiB) | peak (MiB) | overhead |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    let mib = |b: usize| b as f64 / (1024.0 * 1024.0);
    for r in reports {
        let ratio = r.ratio_vs_baseline.map_or("-".to_string(), |x| format!("x{x:.3}"));
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.1} | {} | {:.2} | {:.2} | {:.2}% |",
            r.strategy,
            r.ms_per_token.median,
            r.ms_per_token.p10,
            r.ms_per_token.p90,
            r.tokens_per_second,
            ratio,
            mib(r.bytes_before_forward),
            mib(r.peak_bytes_during_forward),
            r.memory_overhead_pct,
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.1), 1.4);
        assert!((percentile(&v, 0.9) - 4.6).abs() < 1e-12);
        assert_eq!(percentile(&[2.0, 4.0], 0.5), 3.0);
    }

    #[test]
    fn options_enforce_protocol_minimums() {
        assert!(BenchOptions { runs: 4, ..Default::default() }.validate().is_err());
        assert!(BenchOptions { warmup: 0, ..Default::default() }.validate().is_err());
        BenchOptions::default().validate().unwrap();
    }
}
