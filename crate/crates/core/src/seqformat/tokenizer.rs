//! Byte-level tokenizer with reserved ids for the template's special tokens.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of plain byte ids.
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecialToken {
    Image,
    EndOfChunk,
    Pad,
    Answer,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 4] = [
        SpecialToken::Image,
        SpecialToken::EndOfChunk,
        SpecialToken::Pad,
        SpecialToken::Answer,
    ];

    pub const fn id(self) -> u32 {
        match self {
            SpecialToken::Image => 256,
            SpecialToken::EndOfChunk => 257,
            SpecialToken::Pad => 258,
            SpecialToken::Answer => 259,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub const fn literal(self) -> &'static str {
        match self {
            SpecialToken::Image => "[image]",
            SpecialToken::EndOfChunk => "[endofchunk]",
            SpecialToken::Pad => "[pad]",
            SpecialToken::Answer => "[answer]",
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.literal())
    }
}

pub const IMAGE: u32 = SpecialToken::Image.id();
pub const END_OF_CHUNK: u32 = SpecialToken::EndOfChunk.id();
pub const PAD: u32 = SpecialToken::Pad.id();
pub const ANSWER: u32 = SpecialToken::Answer.id();

/// Vocabulary size covering bytes and every special token.
pub const VOCAB_SIZE: usize = BYTE_VOCAB + SpecialToken::ALL.len();

pub fn is_special(id: u32) -> bool {
    id as usize >= BYTE_VOCAB
}

/// Plain bytes map to ids `0..256`. Special ids are only ever produced by the
/// renderer, never by [`ToyTokenizer::encode`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyTokenizer;

impl ToyTokenizer {
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    pub fn encode_str(&self, s: &str) -> Vec<u32> {
        self.encode(s.as_bytes())
    }

    /// Bytes of every non-special id; special ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&id| !is_special(id)).map(|&id| id as u8).collect()
    }

    /// Human-readable rendering with special tokens spelled out.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut run = Vec::new();
        for &id in ids {
            match SpecialToken::from_id(id) {
                Some(s) => {
                    out.push_str(&String::from_utf8_lossy(&run));
                    run.clear();
                    out.push_str(s.literal());
                }
                None if (id as usize) < BYTE_VOCAB => run.push(id as u8),
                None => {
                    out.push_str(&String::from_utf8_lossy(&run));
                    run.clear();
                    out.push_str(&format!("[#{id}]"));
                }
            }
        }
        out.push_str(&String::from_utf8_lossy(&run));
        out
    }
}
