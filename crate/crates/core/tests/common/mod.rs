// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;

use entlens::corpus::{align_all, parse_conll, EntitySample};
use entlens::model::ModelHandle;
use entlens::Split;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn model() -> ModelHandle {
    ModelHandle::load_dir("fixture", &fixtures().join("model")).expect("fixture model")
}

pub fn oracle(name: &str) -> serde_json::Value {
    let path = fixtures().join("oracles").join(name);
    let text = std::fs::read_to_string(&path).expect("oracle file");
    serde_json::from_str(&text).expect("oracle json")
}

pub fn f32s(v: &serde_json::Value) -> Vec<f32> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap() as f32).collect()
}

pub fn u32s(v: &serde_json::Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

/// Parsed and aligned samples of a fixture split.
pub fn samples(handle: &ModelHandle, split: Split) -> Vec<EntitySample> {
    let path = fixtures().join("conll").join(format!("{split}.txt"));
    let parsed = parse_conll(&path, split).expect("fixture conll");
    align_all(handle, &parsed.samples).aligned
}

/// Largest elementwise difference relative to the largest magnitude.
pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0f32, |m, x| m.max(x.abs())).max(1e-12);
    a.iter().zip(b).fold(0f32, |m, (x, y)| m.max((x - y).abs())) / scale
}
