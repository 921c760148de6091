// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file, then `ENTLENS_*` environment variables,
//! then command-line flags, each overriding the previous.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model_id: Option<String>,
    /// Checkpoint directory used instead of a registry lookup.
    pub model_dir: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub offline: bool,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_id: None,
            model_dir: None,
            registry: None,
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            offline: false,
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }

    pub fn apply_env(&mut self) -> Result<(), CliError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = var("ENTLENS_MODEL") {
            self.model_id = Some(v);
        }
        if let Some(v) = var("ENTLENS_MODEL_DIR") {
            self.model_dir = Some(v.into());
        }
        if let Some(v) = var("ENTLENS_REGISTRY") {
            self.registry = Some(v.into());
        }
        if let Some(v) = var("ENTLENS_CACHE") {
            self.cache_dir = v.into();
        }
        if let Some(v) = var("ENTLENS_OUT") {
            self.out_dir = v.into();
        }
        if let Some(v) = var("ENTLENS_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| CliError::validation(format!("ENTLENS_SEED: bad integer `{v}`")))?;
        }
        if let Some(v) = var("ENTLENS_OFFLINE") {
            self.offline = !matches!(v.as_str(), "0" | "false");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 7\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 32);
    }
}
