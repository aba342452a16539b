//! GPT-2 byte-level BPE.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use super::{hex_digest, Tokenizer, TokenizerError};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The reversible byte -> printable char table used by GPT-2 vocabularies.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u32 {
        let printable = (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}

pub struct BpeTokenizer {
    vocab: HashMap<String, u32>,
    id_to_token: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    specials: Vec<(String, u32)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
    fingerprint: String,
}

impl std::fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("vocab_size", &self.id_to_token.len())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

impl BpeTokenizer {
    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let vocab_json = fs::read_to_string(vocab)?;
        let merges_txt = fs::read_to_string(merges)?;
        Self::from_strs(&vocab_json, &merges_txt)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let vocab: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let size = vocab.values().map(|&i| i as usize + 1).max().unwrap_or(0);
        let mut id_to_token = vec![String::new(); size];
        for (tok, &id) in &vocab {
            id_to_token[id as usize] = tok.clone();
        }

        let mut ranks = HashMap::new();
        let mut merge_lines = Vec::new();
        for (line_no, line) in merges_txt.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TokenizerError::BadMerge { line: line_no + 1, text: line.to_string() });
            };
            merge_lines.push(line);
            let rank = ranks.len();
            ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }

        let mut specials: Vec<(String, u32)> = vocab
            .iter()
            .filter(|(t, _)| t.starts_with("<|") && t.ends_with("|>") && t.len() > 4)
            .map(|(t, &i)| (t.clone(), i))
            .collect();
        // Longest first so overlapping specials resolve greedily.
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));

        let mut entries: Vec<(&String, &u32)> = vocab.iter().collect();
        entries.sort_by_key(|(_, &id)| id);
        let mut canon = Vec::new();
        for (t, id) in entries {
            canon.extend_from_slice(format!("{id}\t{t}\n").as_bytes());
        }
        canon.extend_from_slice(b"--\n");
        for l in merge_lines {
            canon.extend_from_slice(l.as_bytes());
            canon.push(b'\n');
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let pattern = Regex::new(GPT2_PATTERN).map_err(|e| TokenizerError::Regex(e.to_string()))?;
        Ok(Self {
            vocab,
            id_to_token,
            ranks,
            specials,
            byte_encoder,
            byte_decoder,
            pattern,
            fingerprint: hex_digest(&canon),
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (symbols[i].clone(), symbols[i + 1].clone());
            let mut merged = Vec::with_capacity(symbols.len());
            let mut j = 0;
            while j < symbols.len() {
                if j + 1 < symbols.len() && symbols[j] == a && symbols[j + 1] == b {
                    merged.push(format!("{a}{b}"));
                    j += 2;
                } else {
                    merged.push(symbols[j].clone());
                    j += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<u32>) -> Result<(), TokenizerError> {
        for m in self.pattern.find_iter(text) {
            let piece = m.map_err(|e| TokenizerError::Regex(e.to_string()))?.as_str();
            let mapped: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self
                    .vocab
                    .get(&sym)
                    .ok_or_else(|| TokenizerError::UnknownPiece(sym.clone()))?;
                out.push(*id);
            }
        }
        Ok(())
    }

    fn special(&self, name: &str) -> Option<u32> {
        self.vocab.get(name).copied()
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = self
                .specials
                .iter()
                .filter_map(|(s, id)| rest.find(s.as_str()).map(|at| (at, s.len(), *id)))
                .min_by_key(|&(at, len, _)| (at, std::cmp::Reverse(len)));
            match next {
                Some((at, len, id)) => {
                    self.encode_plain(&rest[..at], &mut out)?;
                    out.push(id);
                    rest = &rest[at + len..];
                }
                None => {
                    self.encode_plain(rest, &mut out)?;
                    break;
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let Some(tok) = self.id_to_token.get(id as usize) else { continue };
            if self.specials.iter().any(|(_, s)| *s == id) {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    fn bos(&self) -> Option<u32> {
        self.special("<|endoftext|>")
    }

    fn eos(&self) -> Option<u32> {
        self.special("<|endoftext|>")
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Tiny vocabulary: all single bytes of "helo wrd" in GPT-2 char form
    // (space is 'Ġ'), plus a few merges.
    fn tiny() -> BpeTokenizer {
        let vocab = r#"{"h":0,"e":1,"l":2,"o":3,"Ġ":4,"w":5,"r":6,"d":7,
            "he":8,"ll":9,"hell":10,"hello":11,"Ġw":12,"or":13,"Ġwor":14,
            "<|endoftext|>":15,"!":16}"#;
        let merges = "#version: 0.2\nh e\nl l\nhe ll\nhell o\nĠ w\no r\nĠw or\n";
        BpeTokenizer::from_strs(vocab, merges).unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = tiny();
        // "hello" -> [hello]; " world" -> [Ġwor, l, d]
        assert_eq!(t.encode("hello world").unwrap(), vec![11, 14, 2, 7]);
        assert_eq!(t.decode(&[11, 14, 2, 7]), "hello world");
    }

    #[test]
    fn special_tokens_are_atomic() {
        let t = tiny();
        assert_eq!(t.encode("hello<|endoftext|>!").unwrap(), vec![11, 15, 16]);
        assert_eq!(t.eos(), Some(15));
        assert_eq!(t.decode(&[11, 15]), "hello<|endoftext|>");
    }

    #[test]
    fn unknown_piece_is_reported() {
        let t = tiny();
        assert!(matches!(t.encode("zzz"), Err(TokenizerError::UnknownPiece(_))));
    }

    #[test]
    fn bad_merge_line() {
        assert!(matches!(
            BpeTokenizer::from_strs(r#"{"a":0}"#, "a b c\n"),
            Err(TokenizerError::BadMerge { line: 1, .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = BpeTokenizer::from_strs(r#"{"h":0,"e":1}"#, "h e\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn pretokenizer_splits_like_gpt2() {
        let t = tiny();
        let pieces: Vec<&str> = t
            .pattern
            .find_iter("I'll pay  $1,250 now")
            .map(|m| m.unwrap().as_str())
            .collect();
        assert_eq!(pieces, vec!["I", "'ll", " pay", " ", " $", "1", ",", "250", " now"]);
    }
}
