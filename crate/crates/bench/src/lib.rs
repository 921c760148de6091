// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared helpers for the benchmarks.

use std::path::PathBuf;

use entlens::model::ModelHandle;

/// Checkpoint directory of the fixture model shipped with the core tests.
pub fn fixture_model_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/model")
}

pub fn load_fixture_model() -> ModelHandle {
    ModelHandle::load_dir("fixture", &fixture_model_dir()).expect("fixture model")
}
