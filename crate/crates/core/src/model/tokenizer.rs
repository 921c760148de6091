// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin wrapper over a Hugging Face `tokenizer.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids with character spans into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `[start, end)` character offsets, whitespace trimmed.
    pub char_offsets: Vec<(usize, usize)>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct TextTokenizer {
    inner: tokenizers::Tokenizer,
    eos_id: u32,
}

impl std::fmt::Debug for TextTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextTokenizer")
            .field("vocab", &self.vocab_size())
            .field("eos_id", &self.eos_id)
            .finish()
    }
}

impl TextTokenizer {
    pub fn from_file(path: &Path, eos_id: u32) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
        Ok(TextTokenizer { inner, eos_id })
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    /// Encodes without special tokens, with character offsets.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let enc = self
            .inner
            .encode_char_offsets(text, false)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        let chars: Vec<char> = text.chars().collect();
        let char_offsets = enc
            .get_offsets()
            .iter()
            .map(|&(s, e)| trim_span(&chars, s, e))
            .collect();
        Ok(TokenSequence {
            ids: enc.get_ids().to_vec(),
            char_offsets,
            source_text: text.to_string(),
        })
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.inner
            .decode(ids, true)
            .map_err(|e| Error::Tokenizer(e.to_string()))
    }

    /// Display form of a single token (the decoded text of that id alone).
    pub fn token_text(&self, id: u32) -> String {
        self.decode(&[id])
            .unwrap_or_else(|_| self.inner.id_to_token(id).unwrap_or_default())
    }
}

fn trim_span(chars: &[char], mut s: usize, mut e: usize) -> (usize, usize) {
    e = e.min(chars.len());
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    (s, e)
}
