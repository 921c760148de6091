// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task vectors: one learned soft-prompt embedding θ per layer that makes the
//! frozen model spell out the mention an injected representation came from.
//!
//! Prompts are laid out as `[context tokens…] [z] [θ]`, with generation
//! starting right after θ. Training teacher-forces the gold mention tokens
//! (encoded with a leading space) followed by the end-of-text token.

mod train;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use train::{train_task_vector, TvHyper};
pub(crate) use train::{check_pairs, loss_and_grads, PromptParts};

use crate::corpus::EntitySample;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::model::{MixedInput, ModelHandle};
use crate::representations::{RepKind, Representation};
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Uncontextual,
    Contextual,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Uncontextual => "uncontextual",
            Setting::Contextual => "contextual",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncontextual" | "unc" => Ok(Setting::Uncontextual),
            "contextual" | "ctx" => Ok(Setting::Contextual),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub corpus_hash: String,
    pub rep_kind: RepKind,
    pub n_samples: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub init_noise: f32,
    /// Mean teacher-forced loss of each completed epoch.
    pub epoch_losses: Vec<f32>,
    /// Epoch (1-based) whose end-of-epoch θ was kept; 0 means the
    /// initialization.
    pub best_epoch: usize,
    pub final_loss: f32,
    /// Set when training stopped early on a non-finite loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub theta: Vec<f32>,
    pub layer: usize,
    pub setting: Setting,
    pub model_id: String,
    pub meta: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
struct TvSidecar {
    schema: String,
    model_id: String,
    layer: usize,
    setting: Setting,
    d: usize,
    meta: Option<TrainingMeta>,
}

const TV_SCHEMA: &str = "entlens.task_vector/1";

/// Mean embedding row plus seeded Gaussian noise.
pub(crate) fn init_theta(handle: &ModelHandle, noise: f32, seed: u64) -> Vec<f32> {
    let d = handle.d_model();
    let v = handle.vocab_size();
    let mut mean = vec![0f64; d];
    for id in 0..v as u32 {
        for (m, &x) in mean.iter_mut().zip(handle.model().embedding_row(id)) {
            *m += x as f64;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, noise.max(0.0)).expect("non-negative std");
    mean.into_iter()
        .map(|m| (m / v as f64) as f32 + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
        .collect()
}

impl TaskVector {
    /// Untrained θ at the usual initialization; the random-vector control.
    pub fn random(handle: &ModelHandle, layer: usize, setting: Setting, seed: u64) -> Self {
        TaskVector {
            theta: init_theta(handle, TvHyper::default().init_noise, seed),
            layer,
            setting,
            model_id: handle.model_id.clone(),
            meta: None,
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let side = TvSidecar {
            schema: TV_SCHEMA.into(),
            model_id: self.model_id.clone(),
            layer: self.layer,
            setting: self.setting,
            d: self.theta.len(),
            meta: self.meta.clone(),
        };
        store::save(stem, &self.theta, &side)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (theta, side): (Vec<f32>, TvSidecar) = store::load(stem)?;
        if side.schema != TV_SCHEMA || theta.len() != side.d {
            return Err(Error::Checkpoint(format!(
                "{}: not a task vector checkpoint",
                stem.display()
            )));
        }
        Ok(TaskVector {
            theta,
            layer: side.layer,
            setting: side.setting,
            model_id: side.model_id,
            meta: side.meta,
        })
    }

    /// Conventional file stem inside a task-vector directory.
    pub fn file_stem(setting: Setting, layer: usize) -> String {
        format!("tv-{setting}-L{layer}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub max_new_tokens: usize,
    /// Extra stop ids; the model's end-of-text id always stops generation.
    pub stop_ids: Vec<u32>,
    pub stop_on_newline: bool,
    pub normalization: String,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            max_new_tokens: 16,
            stop_ids: Vec::new(),
            stop_on_newline: true,
            normalization: "whitespace".into(),
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_model(rep: &Representation, tv: &TaskVector) -> Result<()> {
    if rep.model_id != tv.model_id {
        return Err(Error::ModelMismatch {
            left: rep.model_id.clone(),
            right: tv.model_id.clone(),
        });
    }
    Ok(())
}

/// `[z, θ]`.
pub fn build_prompt_uncontextual(rep: &Representation, tv: &TaskVector) -> Result<MixedInput> {
    check_model(rep, tv)?;
    let mut input = MixedInput::default();
    input.push_vector(rep.vector.clone());
    input.push_vector(tv.theta.clone());
    Ok(input)
}

/// `[t_1 … t_n, z, θ]` over the sample's full sentence.
pub fn build_prompt_contextual(
    handle: &ModelHandle,
    sample: &EntitySample,
    rep: &Representation,
    tv: &TaskVector,
) -> Result<MixedInput> {
    check_model(rep, tv)?;
    let toks = handle.tokenize(&sample.text)?;
    if toks.len() + 2 > handle.max_context {
        return Err(Error::ContextOverflow {
            len: toks.len() + 2,
            max: handle.max_context,
        });
    }
    let mut input = MixedInput::from_tokens(&toks.ids);
    input.push_vector(rep.vector.clone());
    input.push_vector(tv.theta.clone());
    Ok(input)
}

/// Collapses whitespace runs and trims.
pub fn normalize_mention(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Greedy decode from an already built prompt.
pub fn decode_prompt(handle: &ModelHandle, input: &MixedInput, config: &DecodingConfig) -> Result<String> {
    config.validate()?;
    let mut stops: HashSet<u32> = config.stop_ids.iter().copied().collect();
    stops.insert(handle.eos_id());
    let gen = handle.generate_greedy(input, config.max_new_tokens, &stops)?;
    let mut text = gen.text.as_str();
    if config.stop_on_newline {
        if let Some(i) = text.find('\n') {
            text = &text[..i];
        }
    }
    Ok(normalize_mention(text))
}

/// Decodes the mention encoded in `rep`. `sample` supplies the context and
/// is required exactly when `tv` is contextual.
pub fn decode_mention(
    handle: &ModelHandle,
    tv: &TaskVector,
    rep: &Representation,
    sample: Option<&EntitySample>,
    config: &DecodingConfig,
) -> Result<String> {
    let input = match (tv.setting, sample) {
        (Setting::Uncontextual, None) => build_prompt_uncontextual(rep, tv)?,
        (Setting::Contextual, Some(s)) => build_prompt_contextual(handle, s, rep, tv)?,
        (Setting::Uncontextual, Some(_)) => {
            return Err(Error::Config("uncontextual decoding takes no sample".into()))
        }
        (Setting::Contextual, None) => {
            return Err(Error::Config("contextual decoding needs the source sample".into()))
        }
    };
    decode_prompt(handle, &input, config)
}

/// Pairwise cosine similarities of task vectors sharing model and setting.
pub fn tv_similarity_matrix(tvs: &[TaskVector]) -> Result<Vec<Vec<f32>>> {
    let first = tvs.first().ok_or(Error::EmptyInput("task vector list"))?;
    for tv in tvs {
        if tv.model_id != first.model_id {
            return Err(Error::ModelMismatch {
                left: first.model_id.clone(),
                right: tv.model_id.clone(),
            });
        }
        if tv.setting != first.setting {
            return Err(Error::Config("task vectors mix settings".into()));
        }
    }
    let n = tvs.len();
    let mut m = vec![vec![0f32; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&tvs[i].theta, &tvs[j].theta);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(theta: Vec<f32>) -> TaskVector {
        TaskVector {
            theta,
            layer: 1,
            setting: Setting::Uncontextual,
            model_id: "m".into(),
            meta: None,
        }
    }

    #[test]
    fn similarity_of_copies_and_orthogonal() {
        let a = tv(vec![1.0, 0.0]);
        let m = tv_similarity_matrix(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(m, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let m = tv_similarity_matrix(&[a, tv(vec![0.0, 3.0])]).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][0], 0.0);
    }

    #[test]
    fn similarity_rejects_mixed_models() {
        let mut b = tv(vec![1.0, 1.0]);
        b.model_id = "other".into();
        assert!(tv_similarity_matrix(&[tv(vec![1.0, 0.0]), b]).is_err());
    }

    #[test]
    fn uncontextual_prompt_layout() {
        let rep = Representation {
            vector: vec![0.0; 2],
            kind: RepKind::Last,
            layer: 1,
            sample_id: "s".into(),
            model_id: "m".into(),
            cleaning_id: None,
        };
        let p = build_prompt_uncontextual(&rep, &tv(vec![1.0, 2.0])).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.elements[1], crate::model::InputElement::Vector(vec![1.0, 2.0]));
        let mut other = rep.clone();
        other.model_id = "x".into();
        assert!(build_prompt_uncontextual(&other, &tv(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_mention("  New \t York  "), "New York");
    }

    #[test]
    fn setting_parse() {
        assert_eq!("ctx".parse::<Setting>().unwrap(), Setting::Contextual);
        assert!("x".parse::<Setting>().is_err());
    }
}
