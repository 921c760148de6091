// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-NeoX architecture hyperparameters read from a `config.json`.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Architecture description of a GPT-NeoX style decoder (the Pythia family).
#[derive(Debug, Clone, PartialEq)]
pub struct NeoxConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    pub rotary_pct: f32,
    pub rotary_base: f32,
    pub layer_norm_eps: f32,
    pub use_parallel_residual: bool,
    pub tie_word_embeddings: bool,
    pub eos_token_id: u32,
}

#[derive(Deserialize)]
struct RopeParameters {
    rope_theta: Option<f32>,
    partial_rotary_factor: Option<f32>,
}

// Covers both the legacy (`rotary_pct`, `rotary_emb_base`) and the newer
// (`rope_parameters`) spellings found in published checkpoints.
#[derive(Deserialize)]
struct RawConfig {
    model_type: Option<String>,
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    rotary_pct: Option<f32>,
    rotary_emb_base: Option<f32>,
    rope_theta: Option<f32>,
    partial_rotary_factor: Option<f32>,
    rope_parameters: Option<RopeParameters>,
    layer_norm_eps: Option<f32>,
    use_parallel_residual: Option<bool>,
    tie_word_embeddings: Option<bool>,
    eos_token_id: Option<u32>,
    hidden_act: Option<String>,
}

impl NeoxConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        if let Some(kind) = &raw.model_type {
            if kind != "gpt_neox" {
                return Err(Error::Checkpoint(format!(
                    "unsupported model_type `{kind}` (expected gpt_neox)"
                )));
            }
        }
        if let Some(act) = &raw.hidden_act {
            if act != "gelu" {
                return Err(Error::Checkpoint(format!("unsupported activation `{act}`")));
            }
        }
        let rope = raw.rope_parameters.as_ref();
        let cfg = NeoxConfig {
            vocab_size: raw.vocab_size,
            hidden_size: raw.hidden_size,
            num_layers: raw.num_hidden_layers,
            num_heads: raw.num_attention_heads,
            intermediate_size: raw.intermediate_size,
            max_position_embeddings: raw.max_position_embeddings,
            rotary_pct: raw
                .rotary_pct
                .or(raw.partial_rotary_factor)
                .or(rope.and_then(|r| r.partial_rotary_factor))
                .unwrap_or(1.0),
            rotary_base: raw
                .rotary_emb_base
                .or(raw.rope_theta)
                .or(rope.and_then(|r| r.rope_theta))
                .unwrap_or(10000.0),
            layer_norm_eps: raw.layer_norm_eps.unwrap_or(1e-5),
            use_parallel_residual: raw.use_parallel_residual.unwrap_or(true),
            tie_word_embeddings: raw.tie_word_embeddings.unwrap_or(false),
            eos_token_id: raw.eos_token_id.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.vocab_size < 2 {
            return Err(Error::Checkpoint(
                "need n_layers >= 1, d_model >= 1 and vocab_size >= 2".into(),
            ));
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Checkpoint(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.rotary_dims() % 2 != 0 {
            return Err(Error::Checkpoint("rotary dimension must be even".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Number of leading dimensions of each head that receive rotary encoding.
    pub fn rotary_dims(&self) -> usize {
        (self.head_dim() as f32 * self.rotary_pct) as usize
    }
}
