// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local model registry: a TOML file mapping model ids to checkpoint files.
//!
//! ```toml
//! [models.pythia-70m]
//! dir = "/models/pythia-70m"
//!
//! [models.custom]
//! config = "/ckpt/config.json"
//! checkpoint = "/ckpt/model.safetensors"
//! tokenizer = "/ckpt/tokenizer.json"
//! ```
//!
//! Relative paths resolve against the registry file's directory. Nothing is
//! ever fetched over the network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::handle::ModelHandle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub dir: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub max_context: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(default)]
    pub models: BTreeMap<String, ModelEntry>,
    #[serde(skip)]
    base: PathBuf,
}

impl ModelRegistry {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg = Self::from_toml(&text)?;
        reg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(reg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model registry: {e}")))
    }

    /// Registers a checkpoint directory under `id`.
    pub fn insert_dir(&mut self, id: impl Into<String>, dir: impl Into<PathBuf>) {
        self.models.insert(
            id.into(),
            ModelEntry {
                dir: Some(dir.into()),
                ..Default::default()
            },
        );
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// `(config, checkpoint, tokenizer)` paths for `id`.
    pub fn paths(&self, id: &str) -> Result<(PathBuf, PathBuf, PathBuf)> {
        let e = self
            .models
            .get(id)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))?;
        let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf> {
            match (explicit, &e.dir) {
                (Some(p), _) => Ok(self.resolve(p)),
                (None, Some(d)) => Ok(self.resolve(d).join(file)),
                (None, None) => Err(Error::Config(format!(
                    "model `{id}` needs `dir` or an explicit `{file}` path"
                ))),
            }
        };
        Ok((
            pick(&e.config, "config.json")?,
            pick(&e.checkpoint, "model.safetensors")?,
            pick(&e.tokenizer, "tokenizer.json")?,
        ))
    }

    pub fn load(&self, id: &str) -> Result<ModelHandle> {
        let (cfg, ckpt, tok) = self.paths(id)?;
        let mut handle = ModelHandle::load_paths(id, &cfg, &ckpt, &tok)?;
        if let Some(mc) = self.models[id].max_context {
            handle.max_context = mc.min(handle.max_context);
        }
        Ok(handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_dir_and_explicit_paths() {
        let mut reg = ModelRegistry::from_toml(
            r#"
            [models.a]
            dir = "ckpt/a"
            [models.b]
            config = "/x/config.json"
            checkpoint = "/x/w.safetensors"
            tokenizer = "/x/tok.json"
            "#,
        )
        .unwrap();
        reg.base = PathBuf::from("/reg");
        let (c, w, t) = reg.paths("a").unwrap();
        assert_eq!(c, PathBuf::from("/reg/ckpt/a/config.json"));
        assert_eq!(w, PathBuf::from("/reg/ckpt/a/model.safetensors"));
        assert_eq!(t, PathBuf::from("/reg/ckpt/a/tokenizer.json"));
        assert_eq!(reg.paths("b").unwrap().1, PathBuf::from("/x/w.safetensors"));
        assert!(matches!(reg.paths("zzz"), Err(Error::UnknownModel(_))));
    }
}
