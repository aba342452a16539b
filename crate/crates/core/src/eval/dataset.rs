use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McChoice {
    pub text: String,
    pub is_true: bool,
}

/// A multiple-choice item. `prompt` already carries any few-shot template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McExample {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<McChoice>,
}

impl McExample {
    /// At least two choices, with at least one true and one false.
    pub fn validate(&self) -> Result<(), EvalError> {
        let trues = self.choices.iter().filter(|c| c.is_true).count();
        if self.choices.len() < 2 {
            return Err(EvalError::MalformedExample { id: self.id.clone(), reason: "fewer than two choices".into() });
        }
        if trues == 0 || trues == self.choices.len() {
            return Err(EvalError::MalformedExample {
                id: self.id.clone(),
                reason: "needs at least one true and one false choice".into(),
            });
        }
        Ok(())
    }

    pub fn single_true(&self) -> bool {
        self.choices.iter().filter(|c| c.is_true).count() == 1
    }

    pub fn truth(&self) -> Vec<bool> {
        self.choices.iter().map(|c| c.is_true).collect()
    }
}

/// An open-ended prompt with an optional reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenExample {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Dataset { line: i + 1, source: e })?);
    }
    Ok(out)
}

pub fn load_mc_jsonl(path: impl AsRef<Path>) -> Result<Vec<McExample>, EvalError> {
    let data: Vec<McExample> = read_jsonl(path.as_ref())?;
    for ex in &data {
        ex.validate()?;
    }
    Ok(data)
}

pub fn load_open_jsonl(path: impl AsRef<Path>) -> Result<Vec<OpenExample>, EvalError> {
    read_jsonl(path.as_ref())
}
