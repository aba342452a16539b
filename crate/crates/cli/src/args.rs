//! Command-line arguments and their JSON config-file equivalents.
//!
//! Every flag is an `Option` so that "not given" can be told apart from a
//! default: the config file fills unset flags, then defaults apply. Keys in
//! the file are the flag names in snake_case.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "dola", version, about = "Layer-contrastive decoding for decoder-only transformers")]
pub struct Cli {
    /// JSON file with defaults for any flag (CLI values win).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a continuation for one prompt.
    Generate(GenerateArgs),
    /// Score a multiple-choice set and report MC1/MC2/MC3.
    ScoreMc(ScoreMcArgs),
    /// Pick a candidate bucket by two-fold validation.
    Validate(ValidateArgs),
    /// Forced-length decoding latency against vanilla decoding.
    Bench(BenchArgs),
    /// Layer-wise divergence analyses.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Evaluate over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Compare a model against its golden.json.
    CheckGolden(CheckGoldenArgs),
    /// Write a small random model for demos and smoke tests.
    Toy(ToyArgs),
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// JSD matrix between the final layer and each even layer.
    Jsd(ProbeJsdArgs),
    /// Histogram of the most divergent layer, split by entity tokens.
    Critical(ProbeCriticalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Vanilla,
    Dola,
    DolaStatic,
    DolaRandom,
    Cd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn on(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum MaskArg {
    #[value(name = "-inf")]
    #[serde(rename = "-inf")]
    NegInf,
    #[value(name = "-1000")]
    #[serde(rename = "-1000")]
    Finite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Mc3,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisArg {
    Theta,
    Alpha,
    StaticLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Mc,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeArg {
    PromptAndGenerated,
    GeneratedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    Contrasted,
    MatureLogits,
}

/// Model directory (weights.bin plus optional vocab.json/merges.txt) or a
/// weight file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ContrastArgs {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Automatic bucket id.
    #[arg(long, conflicts_with = "layers")]
    pub bucket: Option<usize>,
    /// Explicit candidate layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub static_layer: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub post_softmax: Option<OnOff>,
    #[arg(long, value_enum, allow_hyphen_values = true)]
    pub mask: Option<MaskArg>,
    /// Seed for dola-random layer draws.
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// Amateur model for the cd strategy.
    #[arg(long)]
    pub amateur: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct DecodeArgs {
    /// Repetition penalty.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop when this string appears (repeatable).
    #[arg(long = "stop")]
    pub stop: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub penalty_scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    pub penalty_stage: Option<StageArg>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub contrast: ContrastArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub decode: DecodeArgs,
    /// Write the per-step trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Keep early-exit logits in the trace.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub record_logits: Option<bool>,
    /// Write a JSON report here as well as the text to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ScoreMcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub contrast: ContrastArgs,
    #[arg(long, value_enum)]
    pub length_normalize: Option<OnOff>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub post_softmax: Option<OnOff>,
    #[arg(long, value_enum)]
    pub length_normalize: Option<OnOff>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// JSONL with a "prompt" field per line.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub new_tokens: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Candidate strategy measured against vanilla decoding.
    #[command(flatten)]
    #[serde(flatten)]
    pub contrast: ContrastArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ProbeJsdArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Layers to probe, comma separated (default: every even layer).
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ProbeCriticalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// JSONL of {"tokens","is_entity"} or {"spans":[{"text","is_entity"}]}.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<usize>>,
    /// Do not prepend the BOS token.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_bos: Option<bool>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum)]
    pub axis: Option<AxisArg>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub contrast: ContrastArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, value_enum)]
    pub length_normalize: Option<OnOff>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CheckGoldenArgs {
    /// Export directory with weights.bin and golden.json.
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub golden: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ToyArgs {
    /// Output directory; weights.bin is written inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blocks that leave the residual stream unchanged.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub identity: Option<bool>,
}
