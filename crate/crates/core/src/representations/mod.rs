// SPDX-License-Identifier: MIT OR Apache-2.0

//! Entity representations: last-token, mention average, and their cleaned
//! variants.

mod cache;
mod cleaning;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::RepCache;
pub use cleaning::{train_cleaning, CleaningHyper, CleaningMap, CleaningMeta};

use crate::corpus::EntitySample;
use crate::error::{Error, Result};
use crate::model::{LogitRows, ModelHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    Last,
    Average,
    CleanedLast,
    CleanedAverage,
}

impl RepKind {
    /// The extraction kind a cleaned kind was derived from.
    pub fn base(self) -> RepKind {
        match self {
            RepKind::Last | RepKind::CleanedLast => RepKind::Last,
            RepKind::Average | RepKind::CleanedAverage => RepKind::Average,
        }
    }

    pub fn cleaned(self) -> RepKind {
        match self.base() {
            RepKind::Last => RepKind::CleanedLast,
            _ => RepKind::CleanedAverage,
        }
    }

    pub fn is_cleaned(self) -> bool {
        matches!(self, RepKind::CleanedLast | RepKind::CleanedAverage)
    }
}

impl fmt::Display for RepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RepKind::Last => "last",
            RepKind::Average => "average",
            RepKind::CleanedLast => "cleaned_last",
            RepKind::CleanedAverage => "cleaned_average",
        })
    }
}

impl FromStr for RepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "last" => RepKind::Last,
            "average" | "avg" => RepKind::Average,
            "cleaned_last" => RepKind::CleanedLast,
            "cleaned_average" => RepKind::CleanedAverage,
            other => return Err(Error::Config(format!("unknown representation kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub vector: Vec<f32>,
    pub kind: RepKind,
    pub layer: usize,
    pub sample_id: String,
    pub model_id: String,
    /// Set for cleaned kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleaning_id: Option<String>,
}

fn aligned_span(sample: &EntitySample) -> Result<(usize, usize)> {
    sample.token_span.ok_or_else(|| Error::Alignment {
        mention: sample.mention.clone(),
        reason: "sample has no token span; run alignment first".into(),
    })
}

/// Hidden state at the mention's last token.
pub fn extract_last(handle: &ModelHandle, sample: &EntitySample, layer: usize) -> Result<Representation> {
    extract(handle, sample, layer, RepKind::Last)
}

/// Mean hidden state over the mention's tokens.
pub fn extract_average(
    handle: &ModelHandle,
    sample: &EntitySample,
    layer: usize,
) -> Result<Representation> {
    extract(handle, sample, layer, RepKind::Average)
}

pub fn extract(
    handle: &ModelHandle,
    sample: &EntitySample,
    layer: usize,
    kind: RepKind,
) -> Result<Representation> {
    let mut out = extract_layers(handle, std::slice::from_ref(sample), &[layer], kind)?;
    Ok(out.remove(0).remove(0))
}

/// Extracts `kind` at every requested layer with one forward pass per
/// distinct text. Result is indexed `[layer index][sample index]`.
pub fn extract_layers(
    handle: &ModelHandle,
    samples: &[EntitySample],
    layers: &[usize],
    kind: RepKind,
) -> Result<Vec<Vec<Representation>>> {
    if kind.is_cleaned() {
        return Err(Error::Config(
            "cleaned representations come from CleaningMap::apply, not extraction".into(),
        ));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > handle.n_layers()) {
        return Err(Error::LayerOutOfRange {
            layer: l,
            n_layers: handle.n_layers(),
        });
    }
    let d = handle.d_model();
    let mut out: Vec<Vec<Representation>> = vec![Vec::with_capacity(samples.len()); layers.len()];
    let mut trace: Option<(String, crate::model::transformer::ForwardOutput)> = None;
    for sample in samples {
        let (e1, e2) = aligned_span(sample)?;
        if trace.as_ref().is_none_or(|(t, _)| *t != sample.text) {
            let toks = handle.tokenize(&sample.text)?;
            trace = Some((sample.text.clone(), handle.trace_tokens(&toks.ids, LogitRows::None)?));
        }
        let fwd = &trace.as_ref().unwrap().1;
        if e2 >= fwd.seq_len || e1 > e2 {
            return Err(Error::PositionOutOfRange {
                position: e2,
                len: fwd.seq_len,
            });
        }
        for (li, &layer) in layers.iter().enumerate() {
            let vector = match kind {
                RepKind::Last => fwd.residual(layer, e2).to_vec(),
                _ => {
                    let mut acc = vec![0f64; d];
                    for p in e1..=e2 {
                        for (a, &x) in acc.iter_mut().zip(fwd.residual(layer, p)) {
                            *a += x as f64;
                        }
                    }
                    let n = (e2 - e1 + 1) as f64;
                    acc.into_iter().map(|a| (a / n) as f32).collect()
                }
            };
            out[li].push(Representation {
                vector,
                kind,
                layer,
                sample_id: sample.sample_id.clone(),
                model_id: handle.model_id.clone(),
                cleaning_id: None,
            });
        }
    }
    Ok(out)
}
