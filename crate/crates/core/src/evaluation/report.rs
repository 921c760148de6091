// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::EvalReport;
use crate::error::{Error, Result};
use crate::store::write_atomic;

/// SHA-256 (first 16 hex chars) of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    // serde_json maps are ordered by key, so equal configs give equal text
    let value = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    let text = serde_json::to_string(&value).unwrap_or_default();
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Flat tables for plotting: one row per layer, plus one row per populated
/// bucket cell when buckets are present.
pub fn write_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "layer", "length", "quantile_bin", "em", "chrf", "n"])
        .map_err(csv_err)?;
    for s in &report.per_layer {
        w.write_record([
            "layer".to_string(),
            s.layer.to_string(),
            String::new(),
            String::new(),
            format!("{:.6}", s.em),
            format!("{:.6}", s.chrf),
            s.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    if let Some(b) = &report.buckets {
        for c in b.cells.iter().filter(|c| !c.suppressed) {
            w.write_record([
                "bucket".to_string(),
                b.layer.to_string(),
                c.length.to_string(),
                c.quantile_bin.to_string(),
                format!("{:.6}", c.em),
                String::new(),
                c.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"b":[2,1],"a":1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
