// SPDX-License-Identifier: MIT OR Apache-2.0

//! NER corpus ingestion: CoNLL parsing, span alignment against a tokenizer,
//! corpus statistics and the random-span control corpus.

mod align;
mod conll;
mod control;
mod stats;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use align::{align_all, align_span, align_with_tokens, AlignmentReport};
pub use conll::{parse_conll, parse_conll_str, ConllParse};
pub use control::make_control_corpus;
pub use stats::{stats, CorpusStats};

use crate::error::{Error, Result};

/// Version tag written on every JSONL sample line.
pub const SAMPLE_SCHEMA: &str = "entlens.sample/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One sentence with one entity mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySample {
    pub text: String,
    pub mention: String,
    /// `[start, end)` in characters.
    pub char_span: (usize, usize),
    /// Inclusive token indices `(e1, e2)` once aligned.
    pub token_span: Option<(usize, usize)>,
    pub category: String,
    pub split: Split,
    pub sample_id: String,
}

impl EntitySample {
    /// `text[char_span]`, in characters.
    pub fn span_text(&self) -> String {
        self.text
            .chars()
            .skip(self.char_span.0)
            .take(self.char_span.1.saturating_sub(self.char_span.0))
            .collect()
    }

    pub fn mention_len(&self) -> Option<usize> {
        self.token_span.map(|(a, b)| b - a + 1)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    schema: String,
    #[serde(flatten)]
    sample: EntitySample,
}

pub fn write_jsonl(path: &Path, samples: &[EntitySample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = SampleLine {
            schema: SAMPLE_SCHEMA.to_string(),
            sample: s.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EntitySample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line)?;
        if parsed.schema != SAMPLE_SCHEMA {
            return Err(Error::Corpus {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("unsupported schema `{}`", parsed.schema),
            });
        }
        out.push(parsed.sample);
    }
    Ok(out)
}

/// Stable hash of a sample list, used to key caches and checkpoints.
pub fn corpus_hash(samples: &[EntitySample]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.sample_id.as_bytes());
        h.update([0]);
        h.update(s.text.as_bytes());
        h.update([0]);
        h.update(s.char_span.0.to_le_bytes());
        h.update(s.char_span.1.to_le_bytes());
    }
    hex::encode(&h.finalize()[..12])
}
