//! Byte-level toy tokenizer: ids 0-255 are raw bytes, five reserved ids
//! carry the chat structure and modality placeholders, and an optional
//! JSON vocabulary adds greedy longest-match multi-byte entries with byte
//! fallback.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const TOK_USER: u32 = 256;
pub const TOK_ASSISTANT: u32 = 257;
pub const TOK_END: u32 = 258;
pub const TOK_IMAGE: u32 = 259;
pub const TOK_AUDIO: u32 = 260;

/// First id available to vocabulary entries loaded from JSON.
pub const FIRST_VOCAB_ID: u32 = 261;

pub const SPECIAL_TOKENS: [(&str, u32); 5] = [
    ("<|user|>", TOK_USER),
    ("<|assistant|>", TOK_ASSISTANT),
    ("<|end|>", TOK_END),
    ("<image>", TOK_IMAGE),
    ("<audio>", TOK_AUDIO),
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: usize,
    /// Multi-byte entries sorted by descending byte length, then bytes.
    entries: Vec<(Vec<u8>, u32)>,
    decode_map: BTreeMap<u32, Vec<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    vocab_size: usize,
    entries: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Plain byte tokenizer over the toy 512-id space.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            entries: Vec::new(),
            decode_map: BTreeMap::new(),
        }
    }

    /// Load a vocabulary file: `{"vocab_size": N, "entries": {"text": id}}`.
    /// Entry ids must sit in [261, N) so bytes and specials stay stable.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        Self::from_entries(file.vocab_size, file.entries)
    }

    pub fn from_entries(vocab_size: usize, map: BTreeMap<String, u32>) -> Result<Self> {
        if vocab_size < FIRST_VOCAB_ID as usize {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} cannot cover bytes and special tokens"
            )));
        }
        let mut entries = Vec::with_capacity(map.len());
        let mut decode_map = BTreeMap::new();
        for (text, id) in map {
            if text.is_empty() {
                return Err(Error::Config("empty vocabulary entry".into()));
            }
            if id < FIRST_VOCAB_ID || id as usize >= vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary id {id} for {text:?} outside [{FIRST_VOCAB_ID}, {vocab_size})"
                )));
            }
            if decode_map.insert(id, text.as_bytes().to_vec()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary id {id}")));
            }
            entries.push((text.into_bytes(), id));
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            vocab_size,
            entries,
            decode_map,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Encode plain text. Special tokens are never produced here — they are
    /// structural and inserted by the chat renderer; their literal spellings
    /// encode as ordinary bytes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let hit = self
                .entries
                .iter()
                .find(|(pat, _)| bytes[i..].starts_with(pat));
            match hit {
                Some((pat, id)) => {
                    out.push(*id);
                    i += pat.len();
                }
                None => {
                    out.push(bytes[i] as u32);
                    i += 1;
                }
            }
        }
        out
    }

    /// Decode ids to text. Special ids render as their spellings; byte runs
    /// decode as (lossy) UTF-8.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut pending: Vec<u8> = Vec::new();
        let flush = |pending: &mut Vec<u8>, out: &mut String| {
            if !pending.is_empty() {
                out.push_str(&String::from_utf8_lossy(pending));
                pending.clear();
            }
        };
        for &id in ids {
            if id < 256 {
                pending.push(id as u8);
            } else if let Some((name, _)) = SPECIAL_TOKENS.iter().find(|(_, sid)| *sid == id) {
                flush(&mut pending, &mut out);
                out.push_str(name);
            } else if let Some(bytes) = self.decode_map.get(&id) {
                pending.extend_from_slice(bytes);
            } else {
                flush(&mut pending, &mut out);
                out.push('\u{FFFD}');
            }
        }
        flush(&mut pending, &mut out);
        out
    }
}
