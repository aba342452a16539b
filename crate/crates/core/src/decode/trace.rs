use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DecodeError;

/// What happened at one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premature_layer: Option<usize>,
    #[serde(default)]
    pub jsd_by_layer: BTreeMap<usize, f64>,
    pub v_head_size: usize,
    /// Score of the chosen token after the repetition penalty.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_logits: Option<BTreeMap<usize, Vec<f64>>>,
}

/// One record per emitted token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn premature_layers(&self) -> Vec<Option<usize>> {
        self.steps.iter().map(|s| s.premature_layer).collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), DecodeError> {
        let mut w = BufWriter::new(File::create(path)?);
        for step in &self.steps {
            serde_json::to_writer(&mut w, step)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, DecodeError> {
        let mut steps = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line)?);
        }
        Ok(Self { steps })
    }
}
