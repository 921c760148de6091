// SPDX-License-Identifier: MIT OR Apache-2.0

//! [`ModelHandle`]: tokenization, hidden-state capture, mixed token/vector
//! forward passes, greedy generation and sublayer interventions.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::NeoxConfig;
use super::tokenizer::{TextTokenizer, TokenSequence};
use super::transformer::{
    cross_entropy, ForwardOptions, ForwardOutput, KvCache, LogitRows, SublayerKind, SublayerTag,
    Transformer,
};
use super::weights;
use crate::error::{Error, Result};
use crate::linalg::argmax;

/// One element of a mixed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputElement {
    Token(u32),
    /// Placed directly into the embedding slot of its position.
    Vector(Vec<f32>),
}

/// Ordered token ids and raw vectors, fed past the embedding layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedInput {
    pub elements: Vec<InputElement>,
}

impl MixedInput {
    pub fn from_tokens(ids: &[u32]) -> Self {
        MixedInput {
            elements: ids.iter().map(|&i| InputElement::Token(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_token(&mut self, id: u32) {
        self.elements.push(InputElement::Token(id));
    }

    pub fn push_vector(&mut self, v: Vec<f32>) {
        self.elements.push(InputElement::Vector(v));
    }
}

/// Where a captured vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_hash: String,
}

/// Residual-stream vector at the output of block `layer` (0 = embeddings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub vector: Vec<f32>,
    pub layer: usize,
    pub position: usize,
    pub provenance: Provenance,
}

/// Result of a greedy decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub text: String,
    /// True when a stop token ended generation.
    pub stopped: bool,
}

/// A loaded decoder with its tokenizer.
///
/// Not meant for concurrent forward passes; wrap it in a lock (or a work
/// queue) to share it. It can be moved across threads.
#[derive(Debug)]
pub struct ModelHandle {
    pub model_id: String,
    pub max_context: usize,
    /// All computations here are single-threaded and therefore bit-stable;
    /// the flag is recorded in reports.
    pub deterministic: bool,
    model: Transformer,
    tokenizer: TextTokenizer,
}

impl ModelHandle {
    pub fn new(model_id: impl Into<String>, model: Transformer, tokenizer: TextTokenizer) -> Self {
        ModelHandle {
            model_id: model_id.into(),
            max_context: model.config.max_position_embeddings,
            deterministic: true,
            model,
            tokenizer,
        }
    }

    /// Loads `config.json`, `model.safetensors` and `tokenizer.json` from a
    /// checkpoint directory.
    pub fn load_dir(model_id: impl Into<String>, dir: &Path) -> Result<Self> {
        Self::load_paths(
            model_id,
            &dir.join("config.json"),
            &dir.join("model.safetensors"),
            &dir.join("tokenizer.json"),
        )
    }

    pub fn load_paths(
        model_id: impl Into<String>,
        config: &Path,
        checkpoint: &Path,
        tokenizer: &Path,
    ) -> Result<Self> {
        let cfg = NeoxConfig::from_file(config)?;
        let eos = cfg.eos_token_id;
        let model = weights::load_safetensors(cfg, checkpoint)?;
        let tok = TextTokenizer::from_file(tokenizer, eos)?;
        Ok(Self::new(model_id, model, tok))
    }

    pub fn n_layers(&self) -> usize {
        self.model.n_layers()
    }

    pub fn d_model(&self) -> usize {
        self.model.d_model()
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    pub fn eos_id(&self) -> u32 {
        self.tokenizer.eos_id()
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    /// Mutable access, for building synthetic models in tests.
    pub fn model_mut(&mut self) -> &mut Transformer {
        &mut self.model
    }

    pub fn tokenizer(&self) -> &TextTokenizer {
        &self.tokenizer
    }

    pub fn weight_hash(&self) -> String {
        weights::weight_hash(&self.model)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.split_whitespace().next().is_none() {
            return Err(Error::EmptyInput("text is empty after whitespace normalization"));
        }
        let seq = self.tokenizer.encode(text)?;
        if seq.len() > self.max_context {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                max: self.max_context,
            });
        }
        Ok(seq)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        self.tokenizer.decode(ids)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers(),
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab: self.vocab_size(),
            });
        }
        if ids.len() > self.max_context {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                max: self.max_context,
            });
        }
        Ok(())
    }

    /// Embedding rows for a mixed input, validating its invariants.
    pub fn embed_mixed(&self, input: &MixedInput) -> Result<Vec<f32>> {
        if input.is_empty() {
            return Err(Error::EmptyInput("mixed input"));
        }
        if input.len() > self.max_context {
            return Err(Error::ContextOverflow {
                len: input.len(),
                max: self.max_context,
            });
        }
        let d = self.d_model();
        let mut rows = Vec::with_capacity(input.len() * d);
        for el in &input.elements {
            match el {
                InputElement::Token(id) => {
                    if *id as usize >= self.vocab_size() {
                        return Err(Error::TokenOutOfVocab {
                            id: *id,
                            vocab: self.vocab_size(),
                        });
                    }
                    rows.extend_from_slice(self.model.embedding_row(*id));
                }
                InputElement::Vector(v) => {
                    if v.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: v.len(),
                        });
                    }
                    rows.extend_from_slice(v);
                }
            }
        }
        Ok(rows)
    }

    fn prompt_hash(ids: &[u32]) -> String {
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Full trace (all layers, all positions) of a token sequence.
    pub fn trace_tokens(&self, ids: &[u32], logits: LogitRows) -> Result<ForwardOutput> {
        self.check_ids(ids)?;
        let rows = self.embed_mixed(&MixedInput::from_tokens(ids))?;
        Ok(self.model.forward(
            &rows,
            &ForwardOptions {
                logits: Some(logits),
                ..Default::default()
            },
            None,
        ))
    }

    fn hidden_from(
        &self,
        out: &ForwardOutput,
        ids: &[u32],
        layer: usize,
        position: usize,
    ) -> HiddenState {
        HiddenState {
            vector: out.residual(layer, position).to_vec(),
            layer,
            position,
            provenance: Provenance {
                model_id: self.model_id.clone(),
                prompt_hash: Self::prompt_hash(ids),
            },
        }
    }

    /// Residual stream at the output of block `layer` for each position.
    pub fn capture_hidden(
        &self,
        tokens: &TokenSequence,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<HiddenState>> {
        self.check_layer(layer)?;
        self.check_ids(&tokens.ids)?;
        if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::PositionOutOfRange {
                position: p,
                len: tokens.len(),
            });
        }
        let rows = self.embed_mixed(&MixedInput::from_tokens(&tokens.ids))?;
        let out = self.model.forward(
            &rows,
            &ForwardOptions {
                max_layer: Some(layer),
                logits: Some(LogitRows::None),
                ..Default::default()
            },
            None,
        );
        Ok(positions
            .iter()
            .map(|&p| self.hidden_from(&out, &tokens.ids, layer, p))
            .collect())
    }

    /// Logits at every position, `[T, vocab]`.
    pub fn forward_mixed(&self, input: &MixedInput) -> Result<Vec<f32>> {
        let rows = self.embed_mixed(input)?;
        let out = self.model.forward(
            &rows,
            &ForwardOptions {
                logits: Some(LogitRows::All),
                ..Default::default()
            },
            None,
        );
        Ok(out.logits)
    }

    /// Argmax decoding with a KV cache.
    pub fn generate_greedy(
        &self,
        input: &MixedInput,
        max_new_tokens: usize,
        stop_tokens: &HashSet<u32>,
    ) -> Result<Generation> {
        if max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        let rows = self.embed_mixed(input)?;
        let mut cache = KvCache::default();
        let opts = ForwardOptions {
            logits: Some(LogitRows::Last),
            ..Default::default()
        };
        let mut out = self.model.forward(&rows, &opts, Some(&mut cache));
        let mut ids = Vec::new();
        let mut stopped = false;
        let vocab = self.vocab_size();
        for step in 0..max_new_tokens {
            let next = argmax(&out.logits[..vocab]) as u32;
            if stop_tokens.contains(&next) {
                stopped = true;
                break;
            }
            ids.push(next);
            if step + 1 == max_new_tokens {
                break;
            }
            if cache.len() + 1 > self.max_context {
                return Err(Error::ContextOverflow {
                    len: cache.len() + 1,
                    max: self.max_context,
                });
            }
            out = self
                .model
                .forward(self.model.embedding_row(next), &opts, Some(&mut cache));
        }
        let text = self.tokenizer.decode(&ids)?;
        Ok(Generation { ids, text, stopped })
    }

    /// Additive contribution of every sublayer at `position`, in execution
    /// order (attention then MLP for each block).
    pub fn capture_sublayer_outputs(
        &self,
        tokens: &TokenSequence,
        position: usize,
    ) -> Result<Vec<(SublayerTag, Vec<f32>)>> {
        self.check_ids(&tokens.ids)?;
        if position >= tokens.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        let out = self.trace_tokens(&tokens.ids, LogitRows::None)?;
        let d = self.d_model();
        Ok(out
            .sublayers
            .into_iter()
            .map(|(tag, v)| (tag, v[position * d..(position + 1) * d].to_vec()))
            .collect())
    }

    /// Hidden state at `observe_layer` with one sublayer's output zeroed.
    pub fn knockout_forward(
        &self,
        tokens: &TokenSequence,
        knock_layer: usize,
        kind: SublayerKind,
        observe_layer: usize,
        position: usize,
    ) -> Result<HiddenState> {
        if knock_layer == 0 || knock_layer > self.n_layers() {
            return Err(Error::InvalidKnockout(format!(
                "knock layer {knock_layer} outside [1, {}]",
                self.n_layers()
            )));
        }
        self.check_layer(observe_layer)?;
        if observe_layer < knock_layer {
            return Err(Error::InvalidKnockout(format!(
                "observe layer {observe_layer} precedes knock layer {knock_layer}"
            )));
        }
        self.knockout_observe(tokens, knock_layer, kind, observe_layer, position)
    }

    /// Same as [`Self::knockout_forward`] without the ordering precondition, so
    /// knockouts after the observed layer can be checked for causality.
    pub fn knockout_observe(
        &self,
        tokens: &TokenSequence,
        knock_layer: usize,
        kind: SublayerKind,
        observe_layer: usize,
        position: usize,
    ) -> Result<HiddenState> {
        self.check_layer(observe_layer)?;
        self.check_ids(&tokens.ids)?;
        if position >= tokens.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        let rows = self.embed_mixed(&MixedInput::from_tokens(&tokens.ids))?;
        let out = self.model.forward(
            &rows,
            &ForwardOptions {
                knockout: Some(SublayerTag {
                    layer: knock_layer,
                    kind,
                }),
                logits: Some(LogitRows::None),
                ..Default::default()
            },
            None,
        );
        Ok(self.hidden_from(&out, &tokens.ids, observe_layer, position))
    }

    /// Teacher-forced cross-entropy of `targets`, predicted from the rows
    /// starting at `first_pred` (row `first_pred + i` predicts `targets[i]`),
    /// with the gradient with respect to every input row.
    pub fn loss_and_input_grad(
        &self,
        rows: &[f32],
        first_pred: usize,
        targets: &[u32],
    ) -> (f32, Vec<f32>) {
        let range = first_pred..first_pred + targets.len();
        let out = self.model.forward(
            rows,
            &ForwardOptions {
                record: true,
                logits: Some(LogitRows::Range(range)),
                ..Default::default()
            },
            None,
        );
        let (loss, dlogits) = cross_entropy(&out.logits, self.vocab_size(), targets);
        let grad = self.model.backward_inputs(&out, &dlogits);
        (loss, grad)
    }

    /// Loss only; no activations are kept.
    pub fn loss(&self, rows: &[f32], first_pred: usize, targets: &[u32]) -> f32 {
        let range = first_pred..first_pred + targets.len();
        let out = self.model.forward(
            rows,
            &ForwardOptions {
                logits: Some(LogitRows::Range(range)),
                ..Default::default()
            },
            None,
        );
        cross_entropy(&out.logits, self.vocab_size(), targets).0
    }
}
