//! Tokenizers: GPT-2 style byte-level BPE (vocab + merges files) and a
//! plain byte-level fallback for synthetic models.

mod bpe;
mod byte;

use std::path::Path;

use thiserror::Error;

pub use bpe::BpeTokenizer;
pub use byte::ByteTokenizer;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("no vocabulary entry for piece {0:?}")]
    UnknownPiece(String),
    #[error("malformed merges line {line}: {text:?}")]
    BadMerge { line: usize, text: String },
    #[error("merge references unknown symbol {0:?}")]
    MergeSymbol(String),
    #[error("vocab json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pre-tokenizer: {0}")]
    Regex(String),
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError>;

    /// Decode a token sequence. Byte sequences that are not valid UTF-8 are
    /// replaced lossily.
    fn decode(&self, ids: &[u32]) -> String;

    fn vocab_size(&self) -> usize;

    fn bos(&self) -> Option<u32>;

    fn eos(&self) -> Option<u32>;

    /// Stable identity of the vocabulary, used to check that two models
    /// share a tokenizer.
    fn fingerprint(&self) -> String;

    /// Display form of a single token, for table labels.
    fn token_label(&self, id: u32) -> String {
        self.decode(&[id])
    }
}

/// Load `vocab.json` and `merges.txt` if both exist in `dir`, otherwise fall
/// back to the byte-level tokenizer.
pub fn tokenizer_for_dir(dir: &Path) -> Result<Box<dyn Tokenizer>, TokenizerError> {
    let vocab = dir.join("vocab.json");
    let merges = dir.join("merges.txt");
    if vocab.is_file() && merges.is_file() {
        Ok(Box::new(BpeTokenizer::from_files(vocab, merges)?))
    } else {
        Ok(Box::new(ByteTokenizer))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
