use serde::{Deserialize, Serialize};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// One id per UTF-8 byte plus BOS/EOS/PAD. Lossless.
    #[default]
    ByteLevel,
    /// One id per whitespace-separated word, hashed with 32-bit FNV-1a. Not invertible.
    Whitespace,
}

impl Tokenizer {
    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::ByteLevel => "byte_level",
            Tokenizer::Whitespace => "whitespace",
        }
    }

    /// Vocabulary size, `None` when ids are unbounded hashes.
    pub fn vocab_size(self) -> Option<usize> {
        match self {
            Tokenizer::ByteLevel => Some(BYTE_VOCAB),
            Tokenizer::Whitespace => None,
        }
    }

    pub fn encode(self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::ByteLevel => text.bytes().map(u32::from).collect(),
            Tokenizer::Whitespace => text.split_whitespace().map(fnv1a32).collect(),
        }
    }

    /// Byte-level only; special tokens are dropped, invalid UTF-8 replaced.
    pub fn decode(self, ids: &[u32]) -> Option<String> {
        match self {
            Tokenizer::ByteLevel => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
                Some(String::from_utf8_lossy(&bytes).into_owned())
            }
            Tokenizer::Whitespace => None,
        }
    }
}

impl std::str::FromStr for Tokenizer {
    type Err = crate::error::QlabError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "byte_level" | "byte" => Ok(Tokenizer::ByteLevel),
            "whitespace" => Ok(Tokenizer::Whitespace),
            other => Err(crate::error::QlabError::config(
                "/tokenizer",
                format!("unknown tokenizer `{other}`"),
            )),
        }
    }
}

fn fnv1a32(word: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}
