// SPDX-License-Identifier: MIT OR Apache-2.0

//! How entity representations are built up across sublayers, and vectors
//! optimized from noise to decode a chosen mention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::EntitySample;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::model::{LogitRows, ModelHandle, SublayerKind};
use crate::optim::Adam;
use crate::representations::{RepKind, Representation};
use crate::task_vectors::{decode_mention, loss_and_grads, DecodingConfig, PromptParts, Setting, TaskVector};

/// Space in which cumulative states are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySpace {
    #[default]
    Residual,
    /// Logits after the final norm and unembedding.
    Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub prompt: String,
    pub position: usize,
    pub target_layer: usize,
    pub space: SimilaritySpace,
    /// `("embed", …)` followed by one point per sublayer in execution order.
    pub points: Vec<(String, f32)>,
}

impl SimilarityCurve {
    /// Fraction of consecutive steps where the similarity does not drop.
    pub fn monotone_fraction(&self) -> f64 {
        if self.points.len() < 2 {
            return 1.0;
        }
        let ups = self
            .points
            .windows(2)
            .filter(|w| w[1].1 >= w[0].1 - 1e-6)
            .count();
        ups as f64 / (self.points.len() - 1) as f64
    }
}

/// Cosine between `z^{target_layer}` and the running residual sum after the
/// embedding and after each sublayer.
pub fn sublayer_similarity(
    handle: &ModelHandle,
    text: &str,
    position: usize,
    target_layer: usize,
    space: SimilaritySpace,
) -> Result<SimilarityCurve> {
    let toks = handle.tokenize(text)?;
    if target_layer > handle.n_layers() {
        return Err(Error::LayerOutOfRange {
            layer: target_layer,
            n_layers: handle.n_layers(),
        });
    }
    if position >= toks.len() {
        return Err(Error::PositionOutOfRange {
            position,
            len: toks.len(),
        });
    }
    let out = handle.trace_tokens(&toks.ids, LogitRows::None)?;
    let d = handle.d_model();
    let project = |v: &[f32]| match space {
        SimilaritySpace::Residual => v.to_vec(),
        SimilaritySpace::Vocabulary => handle.model().unembed_vector(v, true),
    };
    let target = project(out.residual(target_layer, position));
    let mut running = out.residual(0, position).to_vec();
    let mut points = vec![("embed".to_string(), cosine(&project(&running), &target))];
    for (tag, add) in &out.sublayers {
        for (r, a) in running.iter_mut().zip(&add[position * d..(position + 1) * d]) {
            *r += a;
        }
        points.push((tag.to_string(), cosine(&project(&running), &target)));
    }
    Ok(SimilarityCurve {
        prompt: text.to_string(),
        position,
        target_layer,
        space,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutPoint {
    pub layer: usize,
    pub kind: SublayerKind,
    /// Cosine between the knocked-out and the original representation.
    pub cosine: f32,
}

/// For every sublayer at or below `target_layer`, the similarity of the
/// mention's last-token state at `target_layer` with that sublayer zeroed.
pub fn knockout_effect(
    handle: &ModelHandle,
    sample: &EntitySample,
    target_layer: usize,
) -> Result<Vec<KnockoutPoint>> {
    if target_layer == 0 {
        return Err(Error::InvalidKnockout("target layer must be >= 1".into()));
    }
    let (_, e2) = sample.token_span.ok_or_else(|| Error::Alignment {
        mention: sample.mention.clone(),
        reason: "sample has no token span".into(),
    })?;
    let toks = handle.tokenize(&sample.text)?;
    let original = handle.capture_hidden(&toks, target_layer, &[e2])?.remove(0);
    let mut out = Vec::with_capacity(2 * target_layer);
    for layer in 1..=target_layer {
        for kind in [SublayerKind::Attention, SublayerKind::Mlp] {
            let knocked = handle.knockout_forward(&toks, layer, kind, target_layer, e2)?;
            out.push(KnockoutPoint {
                layer,
                kind,
                cosine: cosine(&knocked.vector, &original.vector),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeHyper {
    pub max_steps: usize,
    pub learning_rate: f32,
    /// Standard deviation of the Gaussian starting point.
    pub noise_std: f32,
    /// Stop once every teacher-forced prediction is correct and the loss is
    /// below this value.
    pub target_loss: f32,
    pub seed: u64,
}

impl Default for OptimizeHyper {
    fn default() -> Self {
        OptimizeHyper {
            max_steps: 2000,
            learning_rate: 0.05,
            noise_std: 1.0,
            target_loss: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedRepresentation {
    pub vector: Vec<f32>,
    pub target: String,
    /// Greedy decode of the averaged vector.
    pub decoded: String,
    /// Final loss and step count of each restart.
    pub restarts: Vec<(f32, usize)>,
    pub hyper: OptimizeHyper,
}

fn all_argmax_correct(handle: &ModelHandle, parts: &PromptParts, rep: &[f32], theta: &[f32]) -> bool {
    let mut input = crate::model::MixedInput::default();
    input.push_vector(rep.to_vec());
    input.push_vector(theta.to_vec());
    for &id in &parts.gold[..parts.gold.len() - 1] {
        input.push_token(id);
    }
    let Ok(logits) = handle.forward_mixed(&input) else {
        return false;
    };
    let v = handle.vocab_size();
    parts.gold.iter().enumerate().all(|(i, &g)| {
        let row = &logits[(1 + i) * v..(2 + i) * v];
        crate::linalg::argmax(row) as u32 == g
    })
}

/// Gradient descent on an input vector (model and θ frozen) so that the
/// uncontextual pipeline decodes `target`. Returns the mean of `n_restarts`
/// converged vectors.
pub fn optimize_representation(
    handle: &ModelHandle,
    tv: &TaskVector,
    target: &str,
    n_restarts: usize,
    hyper: &OptimizeHyper,
) -> Result<OptimizedRepresentation> {
    if tv.setting != Setting::Uncontextual {
        return Err(Error::Config("representation optimization uses an uncontextual task vector".into()));
    }
    if n_restarts == 0 {
        return Err(Error::Config("n_restarts must be >= 1".into()));
    }
    let parts = PromptParts::new(handle, target, None)?;
    let d = handle.d_model();
    let normal = Normal::new(0.0f32, hyper.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut sum = vec![0f64; d];
    let mut restarts = Vec::with_capacity(n_restarts);
    for r in 0..n_restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(r as u64));
        let mut z: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let mut opt = Adam::new(d, hyper.learning_rate);
        let mut best_loss = f32::INFINITY;
        let mut done = None;
        for step in 1..=hyper.max_steps {
            let (loss, g) = loss_and_grads(handle, &parts, &z, &tv.theta, true);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: step,
                    detail: format!("restart {r}: loss {loss}"),
                });
            }
            best_loss = best_loss.min(loss);
            if loss < hyper.target_loss && all_argmax_correct(handle, &parts, &z, &tv.theta) {
                done = Some((loss, step));
                break;
            }
            opt.step(&mut z, &g.unwrap().0);
        }
        let Some(fin) = done else {
            return Err(Error::NotConverged { best_loss });
        };
        restarts.push(fin);
        for (s, &x) in sum.iter_mut().zip(&z) {
            *s += x as f64;
        }
    }
    let vector: Vec<f32> = sum.iter().map(|s| (s / n_restarts as f64) as f32).collect();
    let rep = Representation {
        vector: vector.clone(),
        kind: RepKind::Last,
        layer: tv.layer,
        sample_id: format!("optimized:{target}"),
        model_id: tv.model_id.clone(),
        cleaning_id: None,
    };
    let decoded = decode_mention(handle, tv, &rep, None, &DecodingConfig::default())?;
    Ok(OptimizedRepresentation {
        vector,
        target: target.to_string(),
        decoded,
        restarts,
        hyper: hyper.clone(),
    })
}
