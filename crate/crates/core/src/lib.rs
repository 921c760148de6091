// SPDX-License-Identifier: MIT OR Apache-2.0

//! # entlens
//!
//! Decoding multi-token entity mentions from the hidden states of decoder-only
//! language models.
//!
//! A per-layer *task vector* (a single learned soft-prompt embedding) is
//! trained so that the frozen model, fed `[representation, task vector]`
//! past its embedding layer, generates the mention the representation was
//! extracted from. On top of that the crate provides mention metrics, layer
//! sweeps, learned "cleaning" and relation maps, sublayer knockout analysis
//! and the Entity Lens: a decoded mention for every (layer, token) cell.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod lens;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod relations;
pub mod representations;
pub mod store;
pub mod task_vectors;

pub use corpus::{EntitySample, Split};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, FrequencyRecord};
pub use lens::{LensCell, LensGrid};
pub use model::{
    HiddenState, InputElement, MixedInput, ModelHandle, ModelRegistry, SublayerKind, SublayerTag,
    TokenSequence,
};
pub use relations::{RelationMap, RelationSample};
pub use representations::{CleaningMap, RepKind, Representation};
pub use task_vectors::{DecodingConfig, Setting, TaskVector};
