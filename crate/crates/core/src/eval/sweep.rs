use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::dola::{ContrastConfig, Strategy};
use crate::tokenizer::Tokenizer;

use super::{eval_mc, eval_open, EvalError, EvalModel, EvalOptions, McExample, OpenExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Repetition penalty. Likelihood scoring never applies it, so an MC
    /// sweep over theta yields identical rows by construction.
    Theta,
    Alpha,
    StaticLayer,
}

/// One sweep point. MC sweeps fill the `mc*` columns; open-ended sweeps fill
/// `accuracy` (numeric exact match) and `repeated_bigram_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
    pub mc3: Option<f64>,
    pub accuracy: Option<f64>,
    pub repeated_bigram_rate: Option<f64>,
    pub n: usize,
}

fn configure(
    base: &ContrastConfig,
    decode: &DecodeConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<(ContrastConfig, DecodeConfig), EvalError> {
    let mut contrast = base.clone();
    let mut decode = decode.clone();
    match axis {
        SweepAxis::Theta => decode.repetition_penalty = value,
        SweepAxis::Alpha => contrast.alpha = value,
        SweepAxis::StaticLayer => {
            if !(value >= 0.0 && value.fract() == 0.0) {
                return Err(EvalError::InvalidSweep(format!("static layer {value} is not a layer index")));
            }
            contrast.strategy = Strategy::DolaStatic { static_layer: value as usize };
        }
    }
    Ok((contrast, decode))
}

fn check_values(values: &[f64]) -> Result<(), EvalError> {
    if values.is_empty() {
        return Err(EvalError::InvalidSweep("no values".into()));
    }
    Ok(())
}

/// Evaluate the MC set once per value, in the given order.
pub fn sweep_mc(
    dataset: &[McExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    base: &ContrastConfig,
    axis: SweepAxis,
    values: &[f64],
    options: EvalOptions,
) -> Result<Vec<SweepRow>, EvalError> {
    check_values(values)?;
    values
        .iter()
        .map(|&value| {
            let (contrast, decode) = configure(base, &DecodeConfig::default(), axis, value)?;
            decode.validate()?;
            let m = eval_mc(dataset, model, tokenizer, &contrast, options)?.metrics;
            Ok(SweepRow {
                axis,
                value,
                mc1: Some(m.mc1),
                mc2: Some(m.mc2),
                mc3: Some(m.mc3),
                accuracy: m.accuracy,
                repeated_bigram_rate: None,
                n: m.n,
            })
        })
        .collect()
}

/// Generate for the open-ended set once per value, in the given order.
#[allow(clippy::too_many_arguments)]
pub fn sweep_open(
    dataset: &[OpenExample],
    model: EvalModel<'_>,
    tokenizer: &dyn Tokenizer,
    base: &ContrastConfig,
    decode: &DecodeConfig,
    axis: SweepAxis,
    values: &[f64],
    workers: usize,
) -> Result<Vec<SweepRow>, EvalError> {
    check_values(values)?;
    values
        .iter()
        .map(|&value| {
            let (contrast, decode) = configure(base, decode, axis, value)?;
            let r = eval_open(dataset, model, tokenizer, &contrast, &decode, workers)?;
            Ok(SweepRow {
                axis,
                value,
                mc1: None,
                mc2: None,
                mc3: None,
                accuracy: r.accuracy,
                repeated_bigram_rate: Some(r.repeated_bigram_rate),
                n: r.items.len(),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
