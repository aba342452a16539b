use super::{hex_digest, Tokenizer, TokenizerError};

/// One id per byte plus `<bos>` (256) and `<eos>` (257).
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const VOCAB_SIZE: usize = 258;
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        Ok(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    fn bos(&self) -> Option<u32> {
        Some(Self::BOS)
    }

    fn eos(&self) -> Option<u32> {
        Some(Self::EOS)
    }

    fn fingerprint(&self) -> String {
        hex_digest(b"byte-level:258")
    }

    fn token_label(&self, id: u32) -> String {
        match id {
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            b if b < 256 => {
                let c = b as u8;
                if c.is_ascii() {
                    (c as char).to_string()
                } else {
                    format!("<0x{c:02X}>")
                }
            }
            other => format!("<{other}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_utf8() {
        let t = ByteTokenizer;
        let s = "Wole Soyinka, 1986 € é";
        let ids = t.encode(s).unwrap();
        assert_eq!(ids.len(), s.len());
        assert_eq!(t.decode(&ids), s);
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        let t = ByteTokenizer;
        assert_eq!(t.decode(&[ByteTokenizer::BOS, 104, 105, ByteTokenizer::EOS]), "hi");
        assert_eq!(t.token_label(ByteTokenizer::BOS), "<bos>");
    }
}
