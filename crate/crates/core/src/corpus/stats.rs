// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::EntitySample;
use crate::error::{Error, Result};
use crate::model::ModelHandle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub n_unique_mentions: usize,
    pub mean_text_tokens: f64,
    pub mean_mention_tokens: f64,
    /// mention token count → number of samples
    pub length_histogram: BTreeMap<usize, usize>,
    /// Lower median of the mention token counts.
    pub median_mention_tokens: usize,
    /// Fraction of mentions spanning two or more tokens.
    pub multi_token_fraction: f64,
}

/// Statistics over aligned samples. Text lengths are counted per sample.
pub fn stats(handle: &ModelHandle, samples: &[EntitySample]) -> Result<CorpusStats> {
    let mut text_lens = Vec::with_capacity(samples.len());
    let mut last: Option<(&str, usize)> = None;
    for s in samples {
        let n = match last {
            Some((t, n)) if t == s.text => n,
            _ => handle.tokenize(&s.text)?.len(),
        };
        last = Some((&s.text, n));
        text_lens.push(n);
    }
    stats_from_lengths(samples, &text_lens)
}

pub(crate) fn stats_from_lengths(
    samples: &[EntitySample],
    text_lens: &[usize],
) -> Result<CorpusStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("sample list"));
    }
    let mut lens = Vec::with_capacity(samples.len());
    for s in samples {
        let n = s.mention_len().ok_or_else(|| Error::Alignment {
            mention: s.mention.clone(),
            reason: "sample is not aligned".into(),
        })?;
        lens.push(n);
    }
    let mut histogram = BTreeMap::new();
    for &n in &lens {
        *histogram.entry(n).or_insert(0) += 1;
    }
    let mut sorted = lens.clone();
    sorted.sort_unstable();
    let unique: HashSet<&str> = samples.iter().map(|s| s.mention.as_str()).collect();
    let n = samples.len() as f64;
    Ok(CorpusStats {
        n_samples: samples.len(),
        n_unique_mentions: unique.len(),
        mean_text_tokens: text_lens.iter().sum::<usize>() as f64 / n,
        mean_mention_tokens: lens.iter().sum::<usize>() as f64 / n,
        length_histogram: histogram,
        median_mention_tokens: sorted[(sorted.len() - 1) / 2],
        multi_token_fraction: lens.iter().filter(|&&l| l >= 2).count() as f64 / n,
    })
}
