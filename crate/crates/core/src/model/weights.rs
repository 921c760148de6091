// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loading GPT-NeoX checkpoints stored as safetensors, plus seeded random
//! initialization for synthetic models.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::config::NeoxConfig;
use super::transformer::{Block, LayerNorm, Linear, Transformer};
use crate::error::{Error, Result};

struct TensorStore {
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorStore {
    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("safetensors: {e}")))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                // masks and rotary buffers stored by some exporters
                Dtype::BOOL | Dtype::U8 | Dtype::I64 => continue,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            tensors.insert(name.to_string(), (view.shape().to_vec(), values));
        }
        Ok(TensorStore { tensors })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (got, values) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if got != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {got:?}, expected {shape:?}"
            )));
        }
        Ok(values)
    }
}

/// Loads a `GPTNeoXForCausalLM` checkpoint (`model.safetensors`).
pub fn load_safetensors(config: NeoxConfig, path: &Path) -> Result<Transformer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = TensorStore::from_bytes(&bytes)?;
    let d = config.hidden_size;
    let v = config.vocab_size;
    let inter = config.intermediate_size;
    let eps = config.layer_norm_eps;

    let norm = |store: &mut TensorStore, prefix: &str| -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: store.take(&format!("{prefix}.weight"), &[d])?,
            bias: store.take(&format!("{prefix}.bias"), &[d])?,
            eps,
        })
    };
    let linear = |store: &mut TensorStore, prefix: &str, out: usize, inp: usize| {
        Ok::<_, Error>(Linear {
            weight: store.take(&format!("{prefix}.weight"), &[out, inp])?,
            bias: Some(store.take(&format!("{prefix}.bias"), &[out])?),
            in_dim: inp,
            out_dim: out,
        })
    };

    let embed = store.take("gpt_neox.embed_in.weight", &[v, d])?;
    let mut blocks = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = format!("gpt_neox.layers.{l}");
        blocks.push(Block {
            ln_attn: norm(&mut store, &format!("{p}.input_layernorm"))?,
            ln_mlp: norm(&mut store, &format!("{p}.post_attention_layernorm"))?,
            qkv: linear(&mut store, &format!("{p}.attention.query_key_value"), 3 * d, d)?,
            attn_out: linear(&mut store, &format!("{p}.attention.dense"), d, d)?,
            fc_in: linear(&mut store, &format!("{p}.mlp.dense_h_to_4h"), inter, d)?,
            fc_out: linear(&mut store, &format!("{p}.mlp.dense_4h_to_h"), d, inter)?,
        });
    }
    let final_norm = norm(&mut store, "gpt_neox.final_layer_norm")?;
    let unembed = if config.tie_word_embeddings {
        embed.clone()
    } else {
        store.take("embed_out.weight", &[v, d])?
    };
    Ok(Transformer::new(config, embed, blocks, final_norm, unembed))
}

/// Seeded Gaussian initialization (std 0.02, unit norms), mainly for tests
/// and synthetic experiments.
pub fn random_init(config: NeoxConfig, seed: u64) -> Transformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut sample = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let d = config.hidden_size;
    let v = config.vocab_size;
    let inter = config.intermediate_size;
    let eps = config.layer_norm_eps;
    let unit = || LayerNorm {
        weight: vec![1.0; d],
        bias: vec![0.0; d],
        eps,
    };
    let embed = sample(v * d);
    let mut blocks = Vec::new();
    for _ in 0..config.num_layers {
        let mut lin = |out: usize, inp: usize| Linear {
            weight: sample(out * inp),
            bias: Some(sample(out)),
            in_dim: inp,
            out_dim: out,
        };
        let qkv = lin(3 * d, d);
        let attn_out = lin(d, d);
        let fc_in = lin(inter, d);
        let fc_out = lin(d, inter);
        blocks.push(Block {
            ln_attn: unit(),
            ln_mlp: unit(),
            qkv,
            attn_out,
            fc_in,
            fc_out,
        });
    }
    let unembed = if config.tie_word_embeddings {
        embed.clone()
    } else {
        sample(v * d)
    };
    Transformer::new(config, embed, blocks, unit(), unembed)
}

/// SHA-256 over every parameter, in a fixed order.
pub fn weight_hash(model: &Transformer) -> String {
    let mut h = Sha256::new();
    let mut feed = |xs: &[f32]| {
        for x in xs {
            h.update(x.to_le_bytes());
        }
    };
    feed(&model.embed);
    for b in &model.blocks {
        for n in [&b.ln_attn, &b.ln_mlp] {
            feed(&n.weight);
            feed(&n.bias);
        }
        for l in [&b.qkv, &b.attn_out, &b.fc_in, &b.fc_out] {
            feed(&l.weight);
            if let Some(bias) = &l.bias {
                feed(bias);
            }
        }
    }
    feed(&model.final_norm.weight);
    feed(&model.final_norm.bias);
    feed(&model.unembed);
    hex::encode(h.finalize())
}
