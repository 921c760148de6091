// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear relation maps `z_s ↦ W z_s + b` from subject to object
//! representations, decoded through an uncontextual task vector.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{chr_f, exact_match};
use crate::model::{MixedInput, ModelHandle};
use crate::representations::{extract, RepKind, Representation};
use crate::store;
use crate::task_vectors::{decode_mention, DecodingConfig, Setting, TaskVector};

/// Placeholder replaced by the subject (or object) mention in templates.
pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSample {
    pub subject: String,
    pub object: String,
    pub prompt_template: String,
    pub relation_id: String,
}

#[derive(Debug, Deserialize)]
struct DatasetFile {
    relation_id: String,
    template: String,
    /// Statement used to extract the object representation.
    #[serde(default)]
    object_template: Option<String>,
    pairs: Vec<Pair>,
}

#[derive(Debug, Deserialize)]
struct Pair {
    subject: String,
    object: String,
}

/// A parsed relation dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDataset {
    pub relation_id: String,
    pub samples: Vec<RelationSample>,
    pub object_template: String,
}

/// Default statement wrapping an object mention.
pub const DEFAULT_OBJECT_TEMPLATE: &str = "{} .";

impl RelationSample {
    /// Prompt text plus the character span of the subject inside it.
    pub fn instantiate(&self) -> (String, (usize, usize)) {
        instantiate(&self.prompt_template, &self.subject)
    }
}

fn instantiate(template: &str, mention: &str) -> (String, (usize, usize)) {
    let at = template.find(PLACEHOLDER).unwrap_or(0);
    let text = template.replacen(PLACEHOLDER, mention, 1);
    let start = template[..at].chars().count();
    (text, (start, start + mention.chars().count()))
}

fn check_template(t: &str, what: &str) -> Result<()> {
    match t.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        n => Err(Error::Dataset(format!(
            "{what} template `{t}` must contain `{{}}` exactly once, found {n}"
        ))),
    }
}

/// Reads `{relation_id, template, pairs: [{subject, object}]}`.
pub fn load_relation_dataset(path: &Path) -> Result<RelationDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::Dataset(format!("{}: empty file", path.display())));
    }
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    check_template(&file.template, "prompt")?;
    let object_template = file
        .object_template
        .unwrap_or_else(|| DEFAULT_OBJECT_TEMPLATE.to_string());
    check_template(&object_template, "object")?;
    if file.pairs.is_empty() {
        return Err(Error::Dataset(format!("{}: no pairs", path.display())));
    }
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(file.pairs.len());
    for p in file.pairs {
        if p.subject.trim().is_empty() || p.object.trim().is_empty() {
            return Err(Error::Dataset("pairs need non-empty subject and object".into()));
        }
        if !seen.insert(p.subject.clone()) {
            log::info!("relation {}: duplicate subject `{}`", file.relation_id, p.subject);
        }
        samples.push(RelationSample {
            subject: p.subject,
            object: p.object,
            prompt_template: file.template.clone(),
            relation_id: file.relation_id.clone(),
        });
    }
    Ok(RelationDataset {
        relation_id: file.relation_id,
        samples,
        object_template,
    })
}

/// Keeps pairs whose object appears (case-insensitively) in the model's
/// 10-token greedy continuation of the instantiated prompt.
pub fn filter_known(handle: &ModelHandle, samples: &[RelationSample]) -> Result<Vec<RelationSample>> {
    let mut kept = Vec::new();
    let stops: HashSet<u32> = [handle.eos_id()].into();
    for s in samples {
        let (text, _) = s.instantiate();
        let toks = handle.tokenize(&text)?;
        let gen = handle.generate_greedy(&MixedInput::from_tokens(&toks.ids), 10, &stops)?;
        let known = gen.text.to_lowercase().contains(&s.object.to_lowercase());
        log::info!(
            "filter_known: `{}` -> {:?} ({})",
            s.subject,
            gen.text,
            if known { "kept" } else { "dropped" }
        );
        if known {
            kept.push(s.clone());
        }
    }
    Ok(kept)
}

fn mention_sample(text: String, span: (usize, usize), mention: &str, id: String) -> EntitySample {
    EntitySample {
        text,
        mention: mention.to_string(),
        char_span: span,
        token_span: None,
        category: "REL".into(),
        split: Split::Train,
        sample_id: id,
    }
}

/// Subject representation from the instantiated prompt.
pub fn subject_representation(
    handle: &ModelHandle,
    sample: &RelationSample,
    layer: usize,
    kind: RepKind,
) -> Result<Representation> {
    let (text, span) = sample.instantiate();
    let s = mention_sample(text, span, &sample.subject, format!("subj:{}", sample.subject));
    let s = crate::corpus::align_span(handle, &s)?;
    extract(handle, &s, layer, kind)
}

/// Object representation from a minimal statement containing the object.
pub fn object_representation(
    handle: &ModelHandle,
    object: &str,
    object_template: &str,
    layer: usize,
    kind: RepKind,
) -> Result<Representation> {
    let (text, span) = instantiate(object_template, object);
    let s = mention_sample(text, span, object, format!("obj:{object}"));
    let s = crate::corpus::align_span(handle, &s)?;
    extract(handle, &s, layer, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationHyper {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Training pairs taken from a filtered dataset.
    pub n_train: usize,
}

impl Default for RelationHyper {
    fn default() -> Self {
        RelationHyper {
            steps: 2000,
            learning_rate: 1e-2,
            batch_size: 10,
            seed: 0,
            n_train: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMap {
    /// Row-major `d × d`.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub d: usize,
    pub layer: usize,
    pub rep_kind: RepKind,
    pub relation_id: String,
    pub hyper: RelationHyper,
    pub n_pairs: usize,
    /// Mean squared error over the training pairs, before and after.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub train_ids: Vec<String>,
}

impl RelationMap {
    pub fn apply_vec(&self, z: &[f32]) -> Vec<f32> {
        let d = self.d;
        (0..d)
            .map(|i| crate::linalg::dot(&self.w[i * d..(i + 1) * d], z) + self.b[i])
            .collect()
    }

    pub fn apply(&self, rep: &Representation) -> Result<Representation> {
        if rep.vector.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: rep.vector.len(),
            });
        }
        Ok(Representation {
            vector: self.apply_vec(&rep.vector),
            ..rep.clone()
        })
    }

    /// Mean of `‖W z_s + b − z_o‖² / d` over the pairs.
    pub fn mse(&self, subjects: &[Representation], objects: &[Representation]) -> f64 {
        mse_of(&self.w, &self.b, self.d, subjects, objects)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut data = self.w.clone();
        data.extend_from_slice(&self.b);
        let mut meta = self.clone();
        meta.w.clear();
        meta.b.clear();
        store::save(stem, &data, &meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (mut data, mut meta): (Vec<f32>, RelationMap) = store::load(stem)?;
        if data.len() != meta.d * meta.d + meta.d {
            return Err(Error::Checkpoint(format!("{}: bad relation map", stem.display())));
        }
        meta.b = data.split_off(meta.d * meta.d);
        meta.w = data;
        Ok(meta)
    }
}

fn mse_of(w: &[f32], b: &[f32], d: usize, subjects: &[Representation], objects: &[Representation]) -> f64 {
    let mut total = 0f64;
    for (s, o) in subjects.iter().zip(objects) {
        for i in 0..d {
            let p = crate::linalg::dot(&w[i * d..(i + 1) * d], &s.vector) + b[i];
            let e = (p - o.vector[i]) as f64;
            total += e * e;
        }
    }
    total / (subjects.len() * d) as f64
}

/// Fits `W, b` by minibatch SGD on the mean squared error, starting from
/// `W = 0` and `b = mean(z_o)`. `hyper.steps = 0` returns that starting map.
pub fn train_relation_map(
    subjects: &[Representation],
    objects: &[Representation],
    relation_id: &str,
    hyper: &RelationHyper,
) -> Result<RelationMap> {
    if subjects.len() != objects.len() {
        return Err(Error::RepresentationMismatch(format!(
            "{} subjects but {} objects",
            subjects.len(),
            objects.len()
        )));
    }
    if subjects.len() < 2 {
        return Err(Error::Dataset("relation maps need at least 2 pairs".into()));
    }
    let first = &subjects[0];
    let d = first.vector.len();
    for r in subjects.iter().chain(objects) {
        if r.layer != first.layer || r.kind != first.kind {
            return Err(Error::RepresentationMismatch(
                "subject and object representations must share layer and kind".into(),
            ));
        }
        if r.vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.vector.len(),
            });
        }
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n = subjects.len();
    let mut w = vec![0f32; d * d];
    let mut b = vec![0f32; d];
    for o in objects {
        for (bi, &x) in b.iter_mut().zip(&o.vector) {
            *bi += x / n as f32;
        }
    }
    let initial_mse = mse_of(&w, &b, d, subjects, objects);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut pred = vec![0f32; d];
    'outer: while step < hyper.steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            if step == hyper.steps {
                break 'outer;
            }
            let mut gw = vec![0f32; d * d];
            let mut gb = vec![0f32; d];
            // d/dp of mean over batch and dims of (p - o)^2
            let scale = 2.0 / (batch.len() * d) as f32;
            for &k in batch {
                let z = &subjects[k].vector;
                for i in 0..d {
                    pred[i] = crate::linalg::dot(&w[i * d..(i + 1) * d], z) + b[i];
                }
                for i in 0..d {
                    let g = scale * (pred[i] - objects[k].vector[i]);
                    gb[i] += g;
                    for (dst, &zc) in gw[i * d..(i + 1) * d].iter_mut().zip(z) {
                        *dst += g * zc;
                    }
                }
            }
            for (p, g) in w.iter_mut().zip(&gw) {
                *p -= hyper.learning_rate * g;
            }
            for (p, g) in b.iter_mut().zip(&gb) {
                *p -= hyper.learning_rate * g;
            }
            step += 1;
        }
    }
    let final_mse = mse_of(&w, &b, d, subjects, objects);
    if !final_mse.is_finite() {
        return Err(Error::Diverged {
            epoch: step,
            detail: format!("relation map MSE {final_mse}"),
        });
    }
    Ok(RelationMap {
        w,
        b,
        d,
        layer: first.layer,
        rep_kind: first.kind,
        relation_id: relation_id.to_string(),
        hyper: hyper.clone(),
        n_pairs: n,
        initial_mse,
        final_mse,
        train_ids: subjects.iter().map(|s| s.sample_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub subject: String,
    pub object: String,
    pub prediction: String,
    pub em: bool,
    pub chrf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub relation_id: String,
    pub layer: usize,
    pub rep_kind: RepKind,
    pub em: f64,
    pub chrf: f64,
    pub n: usize,
    pub predictions: Vec<RelationPrediction>,
}

/// Maps each subject representation and decodes it with `tv`.
pub fn eval_relation(
    handle: &ModelHandle,
    map: &RelationMap,
    tv: &TaskVector,
    samples: &[RelationSample],
    config: &DecodingConfig,
) -> Result<RelationReport> {
    if tv.setting != Setting::Uncontextual {
        return Err(Error::Config("relation decoding uses an uncontextual task vector".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("relation samples"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let z = subject_representation(handle, s, map.layer, map.rep_kind)?;
        let mapped = map.apply(&z)?;
        let prediction = decode_mention(handle, tv, &mapped, None, config)?;
        predictions.push(RelationPrediction {
            subject: s.subject.clone(),
            object: s.object.clone(),
            em: exact_match(&prediction, &s.object),
            chrf: chr_f(&prediction, &s.object),
            prediction,
        });
    }
    let n = predictions.len();
    Ok(RelationReport {
        relation_id: map.relation_id.clone(),
        layer: map.layer,
        rep_kind: map.rep_kind,
        em: predictions.iter().filter(|p| p.em).count() as f64 / n as f64,
        chrf: predictions.iter().map(|p| p.chrf).sum::<f64>() / n as f64,
        n,
        predictions,
    })
}

/// Splits filtered pairs into `n_train` training pairs and the rest,
/// asserting the two sides share no subject.
pub fn split_pairs(samples: &[RelationSample], n_train: usize) -> Result<(Vec<RelationSample>, Vec<RelationSample>)> {
    let n = n_train.min(samples.len());
    let (train, test) = samples.split_at(n);
    let train_subjects: BTreeSet<&str> = train.iter().map(|s| s.subject.as_str()).collect();
    let test: Vec<RelationSample> = test
        .iter()
        .filter(|s| {
            let leak = train_subjects.contains(s.subject.as_str());
            if leak {
                log::info!("split: dropping test pair with training subject `{}`", s.subject);
            }
            !leak
        })
        .cloned()
        .collect();
    Ok((train.to_vec(), test))
}
