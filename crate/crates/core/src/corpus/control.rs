// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EntitySample;
use crate::error::{Error, Result};
use crate::model::{ModelHandle, TokenSequence};

/// True when the character after `end` is whitespace, punctuation or the end
/// of the text.
fn ends_word(chars: &[char], end: usize) -> bool {
    match chars.get(end) {
        None => true,
        Some(c) => c.is_whitespace() || !c.is_alphanumeric(),
    }
}

/// Replaces each sample's mention with a uniformly drawn `k`-token window of
/// its own text whose last token ends a word. Samples without such a window
/// are skipped and logged. A pure function of `(samples, k, seed)`.
pub fn make_control_corpus(
    handle: &ModelHandle,
    samples: &[EntitySample],
    k: usize,
    seed: u64,
) -> Result<Vec<EntitySample>> {
    control_with(|text| handle.tokenize(text), samples, k, seed)
}

pub(crate) fn control_with(
    mut tokenize: impl FnMut(&str) -> Result<TokenSequence>,
    samples: &[EntitySample],
    k: usize,
    seed: u64,
) -> Result<Vec<EntitySample>> {
    if k == 0 {
        return Err(Error::Config("control window length k must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let toks = tokenize(&s.text)?;
        let chars: Vec<char> = s.text.chars().collect();
        if toks.len() < k {
            log::info!("control: skipping {} (shorter than {k} tokens)", s.sample_id);
            continue;
        }
        let windows: Vec<usize> = (0..=toks.len() - k)
            .filter(|&i| {
                let span = &toks.char_offsets[i..i + k];
                span.iter().all(|&(a, b)| a < b)
                    && span[0].0 < span[k - 1].1
                    && ends_word(&chars, span[k - 1].1)
            })
            .collect();
        if windows.is_empty() {
            log::info!("control: skipping {} (no word-final window)", s.sample_id);
            continue;
        }
        let i = windows[rng.random_range(0..windows.len())];
        let start = toks.char_offsets[i].0;
        let end = toks.char_offsets[i + k - 1].1;
        out.push(EntitySample {
            text: s.text.clone(),
            mention: chars[start..end].iter().collect(),
            char_span: (start, end),
            token_span: Some((i, i + k - 1)),
            category: "CONTROL".into(),
            split: s.split,
            sample_id: format!("{}-ctl{k}", s.sample_id),
        });
    }
    Ok(out)
}
