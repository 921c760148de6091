// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{extract_layers, RepKind, Representation};
use crate::corpus::{corpus_hash, EntitySample};
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::store;

const SCHEMA: &str = "entlens.reps/1";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    schema: String,
    model_id: String,
    layer: usize,
    kind: RepKind,
    d: usize,
    sample_ids: Vec<String>,
    corpus_hash: String,
}

/// On-disk representation cache keyed by (model, layer, kind, corpus hash).
#[derive(Debug, Clone)]
pub struct RepCache {
    root: PathBuf,
}

impl RepCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RepCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn stem(&self, model_id: &str, layer: usize, kind: RepKind, hash: &str) -> PathBuf {
        let model_dir = model_id.replace(['/', '\\', ':'], "__");
        self.root.join(model_dir).join(format!("L{layer}-{kind}-{hash}"))
    }

    pub fn contains(&self, model_id: &str, layer: usize, kind: RepKind, hash: &str) -> bool {
        store::exists(&self.stem(model_id, layer, kind, hash))
    }

    /// Cached representations, or [`Error::CacheMiss`].
    pub fn get(
        &self,
        model_id: &str,
        layer: usize,
        kind: RepKind,
        hash: &str,
    ) -> Result<Vec<Representation>> {
        let stem = self.stem(model_id, layer, kind, hash);
        if !store::exists(&stem) {
            return Err(Error::CacheMiss(format!(
                "no {kind} representations for model {model_id}, layer {layer}, corpus {hash}"
            )));
        }
        let (data, side): (Vec<f32>, Sidecar) = store::load(&stem)?;
        if side.schema != SCHEMA || side.d == 0 || data.len() != side.d * side.sample_ids.len() {
            return Err(Error::Checkpoint(format!(
                "{}: inconsistent representation cache",
                stem.display()
            )));
        }
        Ok(side
            .sample_ids
            .into_iter()
            .zip(data.chunks_exact(side.d))
            .map(|(sample_id, v)| Representation {
                vector: v.to_vec(),
                kind,
                layer,
                sample_id,
                model_id: side.model_id.clone(),
                cleaning_id: None,
            })
            .collect())
    }

    /// Stores one (layer, kind) slice. All entries must share model, layer
    /// and kind.
    pub fn put(&self, reps: &[Representation], hash: &str) -> Result<()> {
        let first = reps.first().ok_or(Error::EmptyInput("representation list"))?;
        if reps
            .iter()
            .any(|r| r.layer != first.layer || r.kind != first.kind || r.model_id != first.model_id)
        {
            return Err(Error::RepresentationMismatch(
                "cache slices must share model, layer and kind".into(),
            ));
        }
        let d = first.vector.len();
        let mut data = Vec::with_capacity(d * reps.len());
        for r in reps {
            if r.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.vector.len(),
                });
            }
            data.extend_from_slice(&r.vector);
        }
        let side = Sidecar {
            schema: SCHEMA.into(),
            model_id: first.model_id.clone(),
            layer: first.layer,
            kind: first.kind,
            d,
            sample_ids: reps.iter().map(|r| r.sample_id.clone()).collect(),
            corpus_hash: hash.into(),
        };
        store::save(&self.stem(&first.model_id, first.layer, first.kind, hash), &data, &side)
    }

    /// Reads every requested layer from the cache, extracting (and storing)
    /// the missing ones in a single pass.
    pub fn get_or_extract(
        &self,
        handle: &ModelHandle,
        samples: &[EntitySample],
        layers: &[usize],
        kind: RepKind,
    ) -> Result<Vec<Vec<Representation>>> {
        let hash = corpus_hash(samples);
        let missing: Vec<usize> = layers
            .iter()
            .copied()
            .filter(|&l| !self.contains(&handle.model_id, l, kind, &hash))
            .collect();
        if !missing.is_empty() {
            let fresh = extract_layers(handle, samples, &missing, kind)?;
            for reps in &fresh {
                self.put(reps, &hash)?;
            }
        }
        layers
            .iter()
            .map(|&l| self.get(&handle.model_id, l, kind, &hash))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(id: &str, v: Vec<f32>) -> Representation {
        Representation {
            vector: v,
            kind: RepKind::Last,
            layer: 3,
            sample_id: id.into(),
            model_id: "org/model".into(),
            cleaning_id: None,
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RepCache::new(dir.path());
        let reps = vec![rep("a", vec![1.0, 2.0]), rep("b", vec![3.0, 4.0])];
        assert!(cache.get("org/model", 3, RepKind::Last, "h").is_err());
        cache.put(&reps, "h").unwrap();
        assert_eq!(cache.get("org/model", 3, RepKind::Last, "h").unwrap(), reps);
        assert!(matches!(
            cache.get("org/model", 4, RepKind::Last, "h"),
            Err(Error::CacheMiss(_))
        ));
    }

    #[test]
    fn mixed_slices_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RepCache::new(dir.path());
        let mut b = rep("b", vec![0.0, 0.0]);
        b.layer = 1;
        assert!(cache.put(&[rep("a", vec![1.0, 2.0]), b], "h").is_err());
    }
}
