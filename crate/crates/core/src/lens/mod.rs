// SPDX-License-Identifier: MIT OR Apache-2.0

//! The Entity Lens: a decoded mention and a logit-lens token for every
//! (layer, token position) of a text.

mod render;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use render::{render_html, render_term};

use crate::error::{Error, Result};
use crate::evaluation::config_hash;
use crate::linalg::argmax;
use crate::model::{HiddenState, LogitRows, MixedInput, ModelHandle};
use crate::task_vectors::{decode_prompt, DecodingConfig, Setting, TaskVector};

pub const GRID_SCHEMA: &str = "entlens.lens_grid/1";

/// Argmax token of the unembedded hidden state.
pub fn logit_lens_top(handle: &ModelHandle, hidden: &HiddenState, apply_final_norm: bool) -> Result<String> {
    if hidden.vector.len() != handle.d_model() {
        return Err(Error::DimensionMismatch {
            expected: handle.d_model(),
            got: hidden.vector.len(),
        });
    }
    Ok(top_token(handle, &hidden.vector, apply_final_norm))
}

fn top_token(handle: &ModelHandle, v: &[f32], apply_final_norm: bool) -> String {
    let logits = handle.model().unembed_vector(v, apply_final_norm);
    handle.tokenizer().token_text(argmax(&logits) as u32)
}

/// Uncontextual task vectors available for lens decoding, keyed by layer.
#[derive(Debug, Clone, Default)]
pub struct TaskVectorSet {
    pub by_layer: BTreeMap<usize, (String, TaskVector)>,
}

impl TaskVectorSet {
    pub fn insert(&mut self, tv: TaskVector) {
        let id = TaskVector::file_stem(tv.setting, tv.layer);
        self.by_layer.insert(tv.layer, (id, tv));
    }

    /// Loads every `tv-uncontextual-L*` checkpoint in `dir` for `model_id`.
    pub fn load_dir(dir: &Path, model_id: &str) -> Result<Self> {
        let mut set = TaskVectorSet::default();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let prefix = format!("tv-{}-L", Setting::Uncontextual);
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix(".json") else { continue };
            if !stem.starts_with(&prefix) {
                continue;
            }
            let tv = TaskVector::load(&dir.join(stem))?;
            if tv.model_id == model_id {
                set.insert(tv);
            }
        }
        Ok(set)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.by_layer.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum TvPolicy {
    /// Each row uses the task vector trained for its layer.
    PerLayer,
    /// Every row uses the task vector of one layer.
    Shared(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensOptions {
    pub decoding: DecodingConfig,
    pub tv_policy: TvPolicy,
    pub apply_final_norm: bool,
    /// Cells whose decode takes longer are marked failed.
    pub cell_timeout_ms: u64,
    /// Record per-cell latency. Always on for non-deterministic handles.
    pub timings: bool,
}

impl Default for LensOptions {
    fn default() -> Self {
        LensOptions {
            decoding: DecodingConfig::default(),
            tv_policy: TvPolicy::PerLayer,
            apply_final_norm: true,
            cell_timeout_ms: 2000,
            timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    pub mention: Option<String>,
    pub logit_top: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensGrid {
    pub schema: String,
    pub model_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub layers: Vec<usize>,
    /// `cells[i][j]`: layer `layers[i]`, token `j`.
    pub cells: Vec<Vec<LensCell>>,
    /// Task vector used for each row, `None` where none was available.
    pub task_vector_ids: Vec<Option<String>>,
    pub config_hash: String,
}

impl LensGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.cells.len(), self.cells.first().map_or(self.tokens.len(), Vec::len))
    }
}

/// Computes the grid from one forward pass over `text`. Decode failures are
/// recorded in their cell; the grid always has shape
/// `(layers.len(), n_tokens)`.
pub fn compute_grid(
    handle: &ModelHandle,
    text: &str,
    tvs: &TaskVectorSet,
    layers: &[usize],
    options: &LensOptions,
) -> Result<LensGrid> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("layer list"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > handle.n_layers()) {
        return Err(Error::LayerOutOfRange {
            layer: l,
            n_layers: handle.n_layers(),
        });
    }
    options.decoding.validate()?;
    let toks = handle.tokenize(text)?;
    let trace = handle.trace_tokens(&toks.ids, LogitRows::None)?;
    let timings = options.timings || !handle.deterministic;
    let timeout = Duration::from_millis(options.cell_timeout_ms);

    let mut cells = Vec::with_capacity(layers.len());
    let mut tv_ids = Vec::with_capacity(layers.len());
    for &layer in layers {
        let tv = match options.tv_policy {
            TvPolicy::PerLayer => tvs.by_layer.get(&layer),
            TvPolicy::Shared(k) => tvs.by_layer.get(&k),
        };
        tv_ids.push(tv.map(|(id, _)| id.clone()));
        let mut row = Vec::with_capacity(toks.len());
        for pos in 0..toks.len() {
            let h = trace.residual(layer, pos);
            let logit_top = top_token(handle, h, options.apply_final_norm);
            let Some((_, tv)) = tv else {
                row.push(LensCell {
                    mention: None,
                    logit_top,
                    latency_ms: None,
                    failed: Some(format!("no task vector for layer {layer}")),
                });
                continue;
            };
            let start = Instant::now();
            let mut input = MixedInput::default();
            input.push_vector(h.to_vec());
            input.push_vector(tv.theta.clone());
            let result = decode_prompt(handle, &input, &options.decoding);
            let elapsed = start.elapsed();
            let latency_ms = timings.then(|| elapsed.as_secs_f64() * 1e3);
            row.push(match result {
                Ok(_) if elapsed > timeout => LensCell {
                    mention: None,
                    logit_top,
                    latency_ms,
                    failed: Some(format!("timeout after {} ms", elapsed.as_millis())),
                },
                Ok(m) => LensCell {
                    mention: Some(m),
                    logit_top,
                    latency_ms,
                    failed: None,
                },
                Err(e) => LensCell {
                    mention: None,
                    logit_top,
                    latency_ms,
                    failed: Some(e.to_string()),
                },
            });
        }
        cells.push(row);
    }
    let tokens = toks
        .ids
        .iter()
        .map(|&id| handle.tokenizer().token_text(id))
        .collect();
    let hash = config_hash(&serde_json::json!({
        "model_id": handle.model_id,
        "weights": handle.weight_hash(),
        "options": options,
        "task_vectors": tv_ids,
    }));
    Ok(LensGrid {
        schema: GRID_SCHEMA.into(),
        model_id: handle.model_id.clone(),
        text: text.to_string(),
        tokens,
        layers: layers.to_vec(),
        cells,
        task_vector_ids: tv_ids,
        config_hash: hash,
    })
}
