// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary `f32` payloads with JSON sidecars, written atomically.
//!
//! `<stem>.f32` holds little-endian floats; `<stem>.json` holds the metadata.
//! Representation caches and every trained checkpoint use this container.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn payload_path(stem: &Path) -> PathBuf {
    with_ext(stem, "f32")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    with_ext(stem, "json")
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = with_ext(path, &format!("tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save<M: Serialize>(stem: &Path, data: &[f32], meta: &M) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(&payload_path(stem), &bytes)?;
    // sidecar last: readers treat its presence as "complete"
    write_atomic(&sidecar_path(stem), &serde_json::to_vec_pretty(meta)?)
}

pub fn load<M: DeserializeOwned>(stem: &Path) -> Result<(Vec<f32>, M)> {
    let sp = sidecar_path(stem);
    let meta_text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let meta = serde_json::from_str(&meta_text)?;
    let pp = payload_path(stem);
    let bytes = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: payload length {} is not a multiple of 4",
            pp.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((data, meta))
}

pub fn exists(stem: &Path) -> bool {
    sidecar_path(stem).is_file() && payload_path(stem).is_file()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("sub/x");
        let data = vec![1.5f32, -0.0, f32::MAX, 3.25];
        save(&stem, &data, &serde_json::json!({"k": 1})).unwrap();
        assert!(exists(&stem));
        let (back, meta): (Vec<f32>, serde_json::Value) = load(&stem).unwrap();
        assert_eq!(back, data);
        assert_eq!(meta["k"], 1);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("y");
        save(&stem, &[1.0], &0u8).unwrap();
        std::fs::write(payload_path(&stem), [0u8; 3]).unwrap();
        assert!(load::<u8>(&stem).is_err());
    }
}
