// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RepKind, Representation};
use crate::corpus::{corpus_hash, EntitySample};
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::optim::Adam;
use crate::store;
use crate::task_vectors::{check_pairs, loss_and_grads, PromptParts, Setting, TaskVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningMeta {
    pub corpus_hash: String,
    pub n_samples: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f32>,
    pub final_loss: f32,
}

/// Affine map `C(z) = W z + b` applied to extracted representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningMap {
    pub id: String,
    /// Row-major `d × d`.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub d: usize,
    pub layer: usize,
    pub setting: Setting,
    pub base_kind: RepKind,
    pub model_id: String,
    pub meta: Option<CleaningMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningHyper {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub min_samples: usize,
}

impl Default for CleaningHyper {
    fn default() -> Self {
        CleaningHyper {
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            min_samples: 100,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MapSidecar {
    schema: String,
    id: String,
    d: usize,
    layer: usize,
    setting: Setting,
    base_kind: RepKind,
    model_id: String,
    meta: Option<CleaningMeta>,
}

const MAP_SCHEMA: &str = "entlens.cleaning_map/1";

impl CleaningMap {
    pub fn identity(
        d: usize,
        layer: usize,
        setting: Setting,
        base_kind: RepKind,
        model_id: impl Into<String>,
    ) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let mut map = CleaningMap {
            id: String::new(),
            w,
            b: vec![0.0; d],
            d,
            layer,
            setting,
            base_kind: base_kind.base(),
            model_id: model_id.into(),
            meta: None,
        };
        map.refresh_id();
        map
    }

    fn refresh_id(&mut self) {
        let mut h = Sha256::new();
        for x in self.w.iter().chain(&self.b) {
            h.update(x.to_le_bytes());
        }
        h.update(format!("{}/{}/{}", self.layer, self.setting, self.base_kind));
        self.id = hex::encode(&h.finalize()[..8]);
    }

    pub fn apply_vec(&self, z: &[f32]) -> Vec<f32> {
        let d = self.d;
        (0..d)
            .map(|i| crate::linalg::dot(&self.w[i * d..(i + 1) * d], z) + self.b[i])
            .collect()
    }

    /// `W z + b`, tagged as the cleaned kind; `rep` itself is untouched.
    pub fn apply(&self, rep: &Representation) -> Result<Representation> {
        if rep.layer != self.layer || rep.kind != self.base_kind {
            return Err(Error::RepresentationMismatch(format!(
                "map for layer {} / {} applied to layer {} / {}",
                self.layer, self.base_kind, rep.layer, rep.kind
            )));
        }
        if rep.vector.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: rep.vector.len(),
            });
        }
        Ok(Representation {
            vector: self.apply_vec(&rep.vector),
            kind: rep.kind.cleaned(),
            layer: rep.layer,
            sample_id: rep.sample_id.clone(),
            model_id: rep.model_id.clone(),
            cleaning_id: Some(self.id.clone()),
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut data = self.w.clone();
        data.extend_from_slice(&self.b);
        let side = MapSidecar {
            schema: MAP_SCHEMA.into(),
            id: self.id.clone(),
            d: self.d,
            layer: self.layer,
            setting: self.setting,
            base_kind: self.base_kind,
            model_id: self.model_id.clone(),
            meta: self.meta.clone(),
        };
        store::save(stem, &data, &side)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (mut data, side): (Vec<f32>, MapSidecar) = store::load(stem)?;
        if side.schema != MAP_SCHEMA || data.len() != side.d * side.d + side.d {
            return Err(Error::Checkpoint(format!(
                "{}: not a cleaning map checkpoint",
                stem.display()
            )));
        }
        let b = data.split_off(side.d * side.d);
        Ok(CleaningMap {
            id: side.id,
            w: data,
            b,
            d: side.d,
            layer: side.layer,
            setting: side.setting,
            base_kind: side.base_kind,
            model_id: side.model_id,
            meta: side.meta,
        })
    }
}

/// Fits `(W, b)` against the decoding cross-entropy with θ frozen, starting
/// from the identity map.
pub fn train_cleaning(
    handle: &ModelHandle,
    tv: &TaskVector,
    samples: &[EntitySample],
    reps: &[Representation],
    hyper: &CleaningHyper,
) -> Result<CleaningMap> {
    check_pairs(samples, reps)?;
    if samples.len() < hyper.min_samples {
        return Err(Error::Dataset(format!(
            "cleaning needs at least {} samples, got {}",
            hyper.min_samples,
            samples.len()
        )));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let base_kind = reps[0].kind;
    if base_kind.is_cleaned() {
        return Err(Error::RepresentationMismatch(
            "cleaning maps are trained on uncleaned representations".into(),
        ));
    }
    if reps[0].model_id != tv.model_id || tv.model_id != handle.model_id {
        return Err(Error::ModelMismatch {
            left: reps[0].model_id.clone(),
            right: tv.model_id.clone(),
        });
    }
    let d = handle.d_model();
    let parts: Vec<PromptParts> = samples
        .iter()
        .map(|s| {
            let ctx = (tv.setting == Setting::Contextual).then_some(s.text.as_str());
            PromptParts::new(handle, &s.mention, ctx)
        })
        .collect::<Result<_>>()?;

    let mut map = CleaningMap::identity(d, reps[0].layer, tv.setting, base_kind, &handle.model_id);
    let mut params = map.w.clone();
    params.extend_from_slice(&map.b);
    let mut opt = Adam::new(params.len(), hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x636c_6e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for batch in order.chunks(hyper.batch_size) {
            let mut grad = vec![0f32; params.len()];
            let (w, b) = params.split_at(d * d);
            for &i in batch {
                let z = &reps[i].vector;
                let cz: Vec<f32> = (0..d)
                    .map(|r| crate::linalg::dot(&w[r * d..(r + 1) * d], z) + b[r])
                    .collect();
                let (loss, g) = loss_and_grads(handle, &parts[i], &cz, &tv.theta, true);
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss {loss} on sample `{}`", samples[i].sample_id),
                    });
                }
                total += loss as f64;
                let g_rep = g.unwrap().0;
                let (gw, gb) = grad.split_at_mut(d * d);
                for r in 0..d {
                    let gr = g_rep[r];
                    gb[r] += gr;
                    for (dst, &zc) in gw[r * d..(r + 1) * d].iter_mut().zip(z) {
                        *dst += gr * zc;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
        }
        let epoch_loss = (total / samples.len() as f64) as f32;
        log::info!("cleaning layer {}: epoch {epoch} loss {epoch_loss:.4}", map.layer);
        epoch_losses.push(epoch_loss);
    }
    let b = params.split_off(d * d);
    map.w = params;
    map.b = b;
    map.refresh_id();
    map.meta = Some(CleaningMeta {
        corpus_hash: corpus_hash(samples),
        n_samples: samples.len(),
        epochs: hyper.epochs,
        learning_rate: hyper.learning_rate,
        batch_size: hyper.batch_size,
        seed: hyper.seed,
        final_loss: epoch_losses.last().copied().unwrap_or(f32::NAN),
        epoch_losses,
    });
    Ok(map)
}
