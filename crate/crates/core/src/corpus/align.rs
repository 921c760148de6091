// SPDX-License-Identifier: MIT OR Apache-2.0

use super::EntitySample;
use crate::error::{Error, Result};
use crate::model::{ModelHandle, TokenSequence};

/// Fills `token_span` with the minimal token range covering `char_span`
/// exactly. Mentions whose boundaries fall inside a token are rejected.
pub fn align_with_tokens(tokens: &TokenSequence, sample: &EntitySample) -> Result<EntitySample> {
    let (s, e) = sample.char_span;
    let fail = |reason: &str| Error::Alignment {
        mention: sample.mention.clone(),
        reason: reason.to_string(),
    };
    if s >= e {
        return Err(fail("empty character span"));
    }
    let covering: Vec<usize> = tokens
        .char_offsets
        .iter()
        .enumerate()
        .filter(|(_, &(a, b))| a < b && a < e && b > s)
        .map(|(i, _)| i)
        .collect();
    let (&e1, &e2) = match (covering.first(), covering.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(fail("no token overlaps the mention")),
    };
    if tokens.char_offsets[e1].0 != s {
        return Err(fail("mention starts inside a token"));
    }
    if tokens.char_offsets[e2].1 != e {
        return Err(fail("mention ends inside a token"));
    }
    let mut out = sample.clone();
    out.token_span = Some((e1, e2));
    Ok(out)
}

pub fn align_span(handle: &ModelHandle, sample: &EntitySample) -> Result<EntitySample> {
    let tokens = handle.tokenize(&sample.text)?;
    align_with_tokens(&tokens, sample)
}

#[derive(Debug, Clone, Default)]
pub struct AlignmentReport {
    pub aligned: Vec<EntitySample>,
    /// `(sample_id, reason)` for every dropped sample.
    pub dropped: Vec<(String, String)>,
}

impl AlignmentReport {
    pub fn drop_rate(&self) -> f64 {
        let total = self.aligned.len() + self.dropped.len();
        if total == 0 {
            0.0
        } else {
            self.dropped.len() as f64 / total as f64
        }
    }
}

/// Aligns every sample, dropping (and logging) the misaligned ones.
pub fn align_all(handle: &ModelHandle, samples: &[EntitySample]) -> AlignmentReport {
    let mut report = AlignmentReport::default();
    let mut last_text: Option<(String, TokenSequence)> = None;
    for s in samples {
        let tokens = match &last_text {
            Some((t, toks)) if *t == s.text => Ok(toks.clone()),
            _ => handle.tokenize(&s.text),
        };
        let res = tokens.and_then(|toks| {
            let r = align_with_tokens(&toks, s);
            last_text = Some((s.text.clone(), toks));
            r
        });
        match res {
            Ok(a) => report.aligned.push(a),
            Err(e) => {
                log::warn!("dropping sample {}: {e}", s.sample_id);
                report.dropped.push((s.sample_id.clone(), e.to_string()));
            }
        }
    }
    report
}
