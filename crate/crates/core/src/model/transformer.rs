// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-NeoX decoder with hook points and an input-gradient backward pass.
//!
//! The forward pass works on embedding rows directly, so callers can mix token
//! embeddings with arbitrary injected vectors. Every forward records the
//! residual stream at the output of each block (index 0 is the embedding
//! output) and each sublayer's additive contribution. When `record` is set the
//! activations needed by [`Transformer::backward_inputs`] are kept, which
//! yields the gradient of a loss with respect to every input row while all
//! weights stay frozen.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::NeoxConfig;
use crate::linalg::{matmul, matmul_bt};

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub eps: f32,
}

/// Normalized rows plus the reciprocal std of each row.
struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNorm {
    /// Normalizes each `d`-wide row of `x`.
    pub fn apply(&self, x: &[f32], d: usize) -> Vec<f32> {
        self.forward(x, d).0
    }

    fn forward(&self, x: &[f32], d: usize) -> (Vec<f32>, NormCache) {
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + self.eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * self.weight[i] + self.bias[i];
            }
        }
        (out, NormCache { xhat, rstd })
    }

    fn backward(&self, cache: &NormCache, dy: &[f32], d: usize, dx: &mut [f32]) {
        let rows = dy.len() / d;
        let mut g = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for i in 0..d {
                g[i] = dyr[i] * self.weight[i];
                mean_g += g[i];
                mean_gx += g[i] * xh[i];
            }
            mean_g /= d as f32;
            mean_gx /= d as f32;
            let rs = cache.rstd[r];
            for i in 0..d {
                dx[r * d + i] += rs * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]` row-major.
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.in_dim;
        let mut out = vec![0.0; rows * self.out_dim];
        matmul_bt(x, &self.weight, rows, self.in_dim, self.out_dim, &mut out);
        if let Some(b) = &self.bias {
            for row in out.chunks_mut(self.out_dim) {
                for (o, bi) in row.iter_mut().zip(b) {
                    *o += bi;
                }
            }
        }
        out
    }

    fn backward_input(&self, dy: &[f32]) -> Vec<f32> {
        let rows = dy.len() / self.out_dim;
        let mut dx = vec![0.0; rows * self.in_dim];
        matmul(dy, &self.weight, rows, self.out_dim, self.in_dim, &mut dx);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub ln_mlp: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

/// The two additive sublayers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    Attention,
    Mlp,
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SublayerKind::Attention => f.write_str("attn"),
            SublayerKind::Mlp => f.write_str("mlp"),
        }
    }
}

/// A sublayer addressed by its 1-based block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SublayerTag {
    pub layer: usize,
    pub kind: SublayerKind,
}

impl fmt::Display for SublayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

/// Which positions get unembedded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogitRows {
    None,
    Last,
    All,
    Range(Range<usize>),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Zero the output of this sublayer.
    pub knockout: Option<SublayerTag>,
    /// Keep activations for [`Transformer::backward_inputs`].
    pub record: bool,
    pub logits: Option<LogitRows>,
    /// Stop after this many blocks (no logits are produced when set below
    /// `n_layers`).
    pub max_layer: Option<usize>,
}

struct BlockRecord {
    ln_attn: NormCache,
    ln_mlp: NormCache,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[heads, T, T]`, upper triangle unused.
    probs: Vec<f32>,
    pre_act: Vec<f32>,
    knocked: Option<SublayerKind>,
}

struct Record {
    blocks: Vec<BlockRecord>,
    final_norm: Option<NormCache>,
}

pub struct ForwardOutput {
    /// `n_layers + 1` entries of `[T, d]`; index 0 is the embedding output.
    pub residuals: Vec<Vec<f32>>,
    /// Additive contributions in execution order, each `[T, d]`.
    pub sublayers: Vec<(SublayerTag, Vec<f32>)>,
    /// `[rows, vocab]` for `logit_rows`.
    pub logits: Vec<f32>,
    pub logit_rows: Range<usize>,
    pub seq_len: usize,
    record: Option<Record>,
}

impl ForwardOutput {
    pub fn logits_at(&self, position: usize, vocab: usize) -> Option<&[f32]> {
        if !self.logit_rows.contains(&position) {
            return None;
        }
        let r = position - self.logit_rows.start;
        Some(&self.logits[r * vocab..(r + 1) * vocab])
    }

    pub fn residual(&self, layer: usize, position: usize) -> &[f32] {
        let d = self.residuals[layer].len() / self.seq_len;
        &self.residuals[layer][position * d..(position + 1) * d]
    }
}

/// Rotated keys and values of already-processed positions.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: NeoxConfig,
    /// `[vocab, d]`.
    pub embed: Vec<f32>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    /// `[vocab, d]`.
    pub unembed: Vec<f32>,
    inv_freq: Vec<f32>,
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * 0.398_942_3;
    cdf + x * pdf
}

impl Transformer {
    pub fn new(
        config: NeoxConfig,
        embed: Vec<f32>,
        blocks: Vec<Block>,
        final_norm: LayerNorm,
        unembed: Vec<f32>,
    ) -> Self {
        let rd = config.rotary_dims();
        let inv_freq = (0..rd / 2)
            .map(|i| 1.0 / config.rotary_base.powf((2 * i) as f32 / rd as f32))
            .collect();
        Transformer {
            config,
            embed,
            blocks,
            final_norm,
            unembed,
            inv_freq,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.hidden_size
    }

    pub fn n_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embedding_row(&self, id: u32) -> &[f32] {
        let d = self.d_model();
        &self.embed[id as usize * d..(id as usize + 1) * d]
    }

    /// Applies the final layer norm and the unembedding to one vector.
    pub fn unembed_vector(&self, hidden: &[f32], apply_final_norm: bool) -> Vec<f32> {
        let d = self.d_model();
        let normed;
        let h = if apply_final_norm {
            normed = self.final_norm.forward(hidden, d).0;
            &normed[..]
        } else {
            hidden
        };
        let mut out = vec![0.0; self.vocab_size()];
        matmul_bt(h, &self.unembed, 1, d, self.vocab_size(), &mut out);
        out
    }

    fn rotate(&self, x: &mut [f32], position: usize, inverse: bool) {
        let half = self.inv_freq.len();
        for (i, f) in self.inv_freq.iter().enumerate() {
            let angle = position as f32 * f;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            let x1 = x[i];
            let x2 = x[i + half];
            x[i] = x1 * c - x2 * s;
            x[i + half] = x2 * c + x1 * s;
        }
    }

    /// Runs the decoder over `embeds` (`[T, d]`).
    ///
    /// With a cache the rows are treated as positions `cache.len()..` and the
    /// cache is extended; recording is only available without a cache.
    pub fn forward(
        &self,
        embeds: &[f32],
        opts: &ForwardOptions,
        mut cache: Option<&mut KvCache>,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let t = embeds.len() / d;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let inter = cfg.intermediate_size;
        let past = cache.as_ref().map_or(0, |c| c.len);
        let record = opts.record && cache.is_none();
        if let Some(c) = cache.as_deref_mut() {
            if c.keys.is_empty() {
                c.keys = vec![Vec::new(); cfg.num_layers];
                c.values = vec![Vec::new(); cfg.num_layers];
            }
        }
        let last_layer = opts.max_layer.unwrap_or(cfg.num_layers).min(cfg.num_layers);
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = embeds.to_vec();
        let mut residuals = Vec::with_capacity(last_layer + 1);
        residuals.push(x.clone());
        let mut sublayers = Vec::with_capacity(2 * last_layer);
        let mut records = Vec::new();

        for (li, block) in self.blocks.iter().enumerate().take(last_layer) {
            let layer = li + 1;
            let knocked = opts
                .knockout
                .filter(|k| k.layer == layer)
                .map(|k| k.kind);

            // attention
            let (a_in, ln_attn) = block.ln_attn.forward(&x, d);
            let qkv = block.qkv.forward(&a_in);
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            for r in 0..t {
                for h in 0..heads {
                    let src = &qkv[r * 3 * d + h * 3 * hd..r * 3 * d + (h + 1) * 3 * hd];
                    let dst = r * d + h * hd;
                    q[dst..dst + hd].copy_from_slice(&src[..hd]);
                    k[dst..dst + hd].copy_from_slice(&src[hd..2 * hd]);
                    v[dst..dst + hd].copy_from_slice(&src[2 * hd..]);
                    self.rotate(&mut q[dst..dst + hd], past + r, false);
                    self.rotate(&mut k[dst..dst + hd], past + r, false);
                }
            }
            let (all_k, all_v): (&[f32], &[f32]);
            let (ck, cv);
            if let Some(c) = cache.as_deref_mut() {
                c.keys[li].extend_from_slice(&k);
                c.values[li].extend_from_slice(&v);
                ck = c.keys[li].clone();
                cv = c.values[li].clone();
                all_k = &ck;
                all_v = &cv;
            } else {
                all_k = &k;
                all_v = &v;
            }
            let total = past + t;
            let mut ctx = vec![0.0; t * d];
            let mut probs = if record {
                vec![0.0; heads * t * t]
            } else {
                Vec::new()
            };
            let mut row = vec![0.0f32; total];
            for h in 0..heads {
                for i in 0..t {
                    let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    let upto = past + i + 1;
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..upto {
                        let kj = &all_k[j * d + h * hd..j * d + (h + 1) * hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for rj in row.iter_mut().take(upto) {
                        *rj = (*rj - mx).exp();
                        z += *rj;
                    }
                    let out = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
                    for j in 0..upto {
                        let p = row[j] / z;
                        if record {
                            probs[(h * t + i) * t + j] = p;
                        }
                        let vj = &all_v[j * d + h * hd..j * d + (h + 1) * hd];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let mut attn = block.attn_out.forward(&ctx);
            if knocked == Some(SublayerKind::Attention) {
                attn.fill(0.0);
            }

            // mlp
            let mlp_input_owned;
            let mlp_input: &[f32] = if cfg.use_parallel_residual {
                &x
            } else {
                mlp_input_owned = x.iter().zip(&attn).map(|(a, b)| a + b).collect::<Vec<_>>();
                &mlp_input_owned
            };
            let (m_in, ln_mlp) = block.ln_mlp.forward(mlp_input, d);
            let pre_act = block.fc_in.forward(&m_in);
            let act: Vec<f32> = pre_act.iter().map(|&u| gelu(u)).collect();
            debug_assert_eq!(act.len(), t * inter);
            let mut mlp = block.fc_out.forward(&act);
            if knocked == Some(SublayerKind::Mlp) {
                mlp.fill(0.0);
            }

            for i in 0..x.len() {
                x[i] += attn[i] + mlp[i];
            }
            residuals.push(x.clone());
            sublayers.push((
                SublayerTag {
                    layer,
                    kind: SublayerKind::Attention,
                },
                attn,
            ));
            sublayers.push((
                SublayerTag {
                    layer,
                    kind: SublayerKind::Mlp,
                },
                mlp,
            ));
            if record {
                records.push(BlockRecord {
                    ln_attn,
                    ln_mlp,
                    q,
                    k,
                    v,
                    probs,
                    pre_act,
                    knocked,
                });
            }
        }
        if let Some(c) = cache {
            c.len += t;
        }

        let mut logit_rows = 0..0;
        let mut logits = Vec::new();
        let mut final_norm = None;
        if last_layer == cfg.num_layers {
            logit_rows = match opts.logits.clone().unwrap_or(LogitRows::Last) {
                LogitRows::None => 0..0,
                LogitRows::Last => t.saturating_sub(1)..t,
                LogitRows::All => 0..t,
                LogitRows::Range(r) => r.start.min(t)..r.end.min(t),
            };
            if !logit_rows.is_empty() {
                let rows = logit_rows.len();
                let slice = &x[logit_rows.start * d..logit_rows.end * d];
                let (normed, cache) = self.final_norm.forward(slice, d);
                logits = vec![0.0; rows * cfg.vocab_size];
                matmul_bt(&normed, &self.unembed, rows, d, cfg.vocab_size, &mut logits);
                if record {
                    final_norm = Some(cache);
                }
            }
        }

        ForwardOutput {
            residuals,
            sublayers,
            logits,
            logit_rows,
            seq_len: t,
            record: record.then_some(Record {
                blocks: records,
                final_norm,
            }),
        }
    }

    /// Gradient of a loss with respect to every input row, given the gradient
    /// with respect to the produced logits (`[rows, vocab]` matching
    /// `out.logit_rows`).
    ///
    /// # Panics
    /// If the forward pass was not recorded or did not run all layers.
    pub fn backward_inputs(&self, out: &ForwardOutput, dlogits: &[f32]) -> Vec<f32> {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let t = out.seq_len;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let rec = out.record.as_ref().expect("forward pass was not recorded");
        assert_eq!(rec.blocks.len(), cfg.num_layers, "partial forward");
        assert_eq!(dlogits.len(), out.logit_rows.len() * cfg.vocab_size);

        let mut dx = vec![0.0; t * d];
        if let Some(fnc) = &rec.final_norm {
            let rows = out.logit_rows.len();
            let mut dn = vec![0.0; rows * d];
            matmul(dlogits, &self.unembed, rows, cfg.vocab_size, d, &mut dn);
            let dst = &mut dx[out.logit_rows.start * d..out.logit_rows.end * d];
            self.final_norm.backward(fnc, &dn, d, dst);
        }

        for (li, block) in self.blocks.iter().enumerate().rev() {
            let r = &rec.blocks[li];
            // dx currently holds d(residual after block).
            let dh = dx.clone();

            // mlp branch
            let mut d_mlp_in = vec![0.0; t * d];
            if r.knocked != Some(SublayerKind::Mlp) {
                let mut d_act = block.fc_out.backward_input(&dh);
                for (g, &u) in d_act.iter_mut().zip(&r.pre_act) {
                    *g *= gelu_grad(u);
                }
                let d_min = block.fc_in.backward_input(&d_act);
                block.ln_mlp.backward(&r.ln_mlp, &d_min, d, &mut d_mlp_in);
            }
            // For the sequential layout the mlp input is x + attn, so its
            // gradient also flows into the attention output.
            let d_attn_out: Vec<f32> = if cfg.use_parallel_residual {
                dh.clone()
            } else {
                dh.iter().zip(&d_mlp_in).map(|(a, b)| a + b).collect()
            };

            let mut d_attn_in = vec![0.0; t * d];
            if r.knocked != Some(SublayerKind::Attention) {
                let dctx = block.attn_out.backward_input(&d_attn_out);
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0f32; t];
                for h in 0..heads {
                    for i in 0..t {
                        let dci = &dctx[i * d + h * hd..i * d + (h + 1) * hd];
                        let probs = &r.probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let mut dot_pd = 0.0;
                        for j in 0..=i {
                            let vj = &r.v[j * d + h * hd..j * d + (h + 1) * hd];
                            dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot_pd += probs[j] * dp[j];
                            let dvj = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                            for (g, c) in dvj.iter_mut().zip(dci) {
                                *g += probs[j] * c;
                            }
                        }
                        for j in 0..=i {
                            let ds = probs[j] * (dp[j] - dot_pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for e in 0..hd {
                                dq[i * d + h * hd + e] += ds * r.k[j * d + h * hd + e];
                                dk[j * d + h * hd + e] += ds * r.q[i * d + h * hd + e];
                            }
                        }
                    }
                }
                let mut dqkv = vec![0.0; t * 3 * d];
                for row in 0..t {
                    for h in 0..heads {
                        let off = row * d + h * hd;
                        self.rotate(&mut dq[off..off + hd], row, true);
                        self.rotate(&mut dk[off..off + hd], row, true);
                        let dst = row * 3 * d + h * 3 * hd;
                        dqkv[dst..dst + hd].copy_from_slice(&dq[off..off + hd]);
                        dqkv[dst + hd..dst + 2 * hd].copy_from_slice(&dk[off..off + hd]);
                        dqkv[dst + 2 * hd..dst + 3 * hd].copy_from_slice(&dv[off..off + hd]);
                    }
                }
                let da_in = block.qkv.backward_input(&dqkv);
                block.ln_attn.backward(&r.ln_attn, &da_in, d, &mut d_attn_in);
            }

            // residual + both branches
            for i in 0..t * d {
                let from_mlp = if cfg.use_parallel_residual {
                    d_mlp_in[i]
                } else {
                    0.0
                };
                dx[i] = d_attn_out[i] + d_attn_in[i] + from_mlp;
            }
        }
        dx
    }
}

/// Mean token cross-entropy of `targets` against consecutive logit rows, and
/// its gradient with respect to those logits.
pub fn cross_entropy(logits: &[f32], vocab: usize, targets: &[u32]) -> (f32, Vec<f32>) {
    assert_eq!(logits.len(), targets.len() * vocab);
    let n = targets.len().max(1) as f32;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0f64;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = row.iter().map(|v| (v - mx).exp()).sum();
        let logz = mx + z.ln();
        loss += (logz - row[tgt as usize]) as f64;
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - logz).exp() / n;
        }
        g[tgt as usize] -= 1.0 / n;
    }
    ((loss / n as f64) as f32, grad)
}
