// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_theta, Setting, TaskVector, TrainingMeta};
use crate::corpus::{corpus_hash, EntitySample};
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::optim::Adam;
use crate::representations::Representation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvHyper {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Standard deviation of the noise added to the mean embedding at init.
    pub init_noise: f32,
}

impl Default for TvHyper {
    fn default() -> Self {
        TvHyper {
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            init_noise: 0.02,
        }
    }
}

/// Token material of one training prompt: optional context and the gold
/// targets (mention tokens then end-of-text).
#[derive(Debug, Clone)]
pub(crate) struct PromptParts {
    pub context: Vec<u32>,
    pub gold: Vec<u32>,
}

impl PromptParts {
    pub fn new(
        handle: &ModelHandle,
        mention: &str,
        context_text: Option<&str>,
    ) -> Result<Self> {
        let context = match context_text {
            Some(t) => handle.tokenize(t)?.ids,
            None => Vec::new(),
        };
        let mut gold = handle.tokenize(&format!(" {}", mention.trim()))?.ids;
        gold.push(handle.eos_id());
        let total = context.len() + 2 + gold.len() - 1;
        if total > handle.max_context {
            return Err(Error::ContextOverflow {
                len: total,
                max: handle.max_context,
            });
        }
        Ok(PromptParts { context, gold })
    }
}

/// Teacher-forced loss of `parts.gold` after `[context, rep, theta]`, and
/// optionally the gradients with respect to the `rep` and `theta` rows.
pub(crate) fn loss_and_grads(
    handle: &ModelHandle,
    parts: &PromptParts,
    rep: &[f32],
    theta: &[f32],
    want_grad: bool,
) -> (f32, Option<(Vec<f32>, Vec<f32>)>) {
    let d = handle.d_model();
    let n_ctx = parts.context.len();
    let n_rows = n_ctx + 2 + parts.gold.len() - 1;
    let mut rows = Vec::with_capacity(n_rows * d);
    for &id in &parts.context {
        rows.extend_from_slice(handle.model().embedding_row(id));
    }
    rows.extend_from_slice(rep);
    rows.extend_from_slice(theta);
    for &id in &parts.gold[..parts.gold.len() - 1] {
        rows.extend_from_slice(handle.model().embedding_row(id));
    }
    let first_pred = n_ctx + 1;
    if !want_grad {
        return (handle.loss(&rows, first_pred, &parts.gold), None);
    }
    let (loss, grad) = handle.loss_and_input_grad(&rows, first_pred, &parts.gold);
    let g_rep = grad[n_ctx * d..(n_ctx + 1) * d].to_vec();
    let g_theta = grad[(n_ctx + 1) * d..(n_ctx + 2) * d].to_vec();
    (loss, Some((g_rep, g_theta)))
}

pub(crate) fn check_pairs(samples: &[EntitySample], reps: &[Representation]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if samples.len() != reps.len() {
        return Err(Error::RepresentationMismatch(format!(
            "{} samples but {} representations",
            samples.len(),
            reps.len()
        )));
    }
    let first = &reps[0];
    for (s, r) in samples.iter().zip(reps) {
        if s.sample_id != r.sample_id {
            return Err(Error::RepresentationMismatch(format!(
                "sample `{}` paired with representation of `{}`",
                s.sample_id, r.sample_id
            )));
        }
        if r.layer != first.layer || r.kind != first.kind || r.model_id != first.model_id {
            return Err(Error::RepresentationMismatch(
                "representations mix layers, kinds or models".into(),
            ));
        }
    }
    Ok(())
}

fn mean_loss(handle: &ModelHandle, parts: &[PromptParts], reps: &[Representation], theta: &[f32]) -> f32 {
    let total: f64 = parts
        .iter()
        .zip(reps)
        .map(|(p, r)| loss_and_grads(handle, p, &r.vector, theta, false).0 as f64)
        .sum();
    (total / parts.len() as f64) as f32
}

/// Trains θ for one layer and setting with Adam; model weights stay frozen.
/// Returns the θ with the lowest epoch loss, where the initialization counts
/// as epoch 0.
pub fn train_task_vector(
    handle: &ModelHandle,
    samples: &[EntitySample],
    reps: &[Representation],
    setting: Setting,
    hyper: &TvHyper,
) -> Result<TaskVector> {
    check_pairs(samples, reps)?;
    if reps[0].model_id != handle.model_id {
        return Err(Error::ModelMismatch {
            left: reps[0].model_id.clone(),
            right: handle.model_id.clone(),
        });
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let parts: Vec<PromptParts> = samples
        .iter()
        .map(|s| {
            let ctx = (setting == Setting::Contextual).then_some(s.text.as_str());
            PromptParts::new(handle, &s.mention, ctx)
        })
        .collect::<Result<_>>()?;

    let d = handle.d_model();
    let mut theta = init_theta(handle, hyper.init_noise, hyper.seed);
    let mut best = theta.clone();
    let mut best_loss = mean_loss(handle, &parts, reps, &theta);
    if !best_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: format!("initial loss is {best_loss}"),
        });
    }
    let mut best_epoch = 0;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut aborted = None;
    let mut opt = Adam::new(d, hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7456_6563);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    'epochs: for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for batch in order.chunks(hyper.batch_size) {
            let mut grad = vec![0f32; d];
            let mut batch_loss = 0f32;
            for &i in batch {
                let (loss, g) = loss_and_grads(handle, &parts[i], &reps[i].vector, &theta, true);
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g.unwrap().1) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let detail = format!("non-finite loss {batch_loss} in epoch {epoch}");
                log::warn!("task vector training aborted: {detail}");
                aborted = Some(detail);
                break 'epochs;
            }
            total += batch_loss as f64;
            opt.step(&mut theta, &grad);
        }
        let epoch_loss = (total / samples.len() as f64) as f32;
        epoch_losses.push(epoch_loss);
        log::info!(
            "layer {} {setting}: epoch {epoch}/{} loss {epoch_loss:.4}",
            reps[0].layer,
            hyper.epochs
        );
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best = theta.clone();
            best_epoch = epoch;
        }
    }
    Ok(TaskVector {
        theta: best,
        layer: reps[0].layer,
        setting,
        model_id: handle.model_id.clone(),
        meta: Some(TrainingMeta {
            corpus_hash: corpus_hash(samples),
            rep_kind: reps[0].kind,
            n_samples: samples.len(),
            epochs: hyper.epochs,
            learning_rate: hyper.learning_rate,
            batch_size: hyper.batch_size,
            seed: hyper.seed,
            init_noise: hyper.init_noise,
            epoch_losses,
            best_epoch,
            final_loss: best_loss,
            aborted,
        }),
    })
}
