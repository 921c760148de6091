// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uniform access to a decoder-only transformer.

pub mod config;
pub mod handle;
pub mod registry;
pub mod tokenizer;
pub mod transformer;
pub mod weights;

pub use config::NeoxConfig;
pub use handle::{Generation, HiddenState, InputElement, MixedInput, ModelHandle, Provenance};
pub use registry::ModelRegistry;
pub use tokenizer::{TextTokenizer, TokenSequence};
pub use transformer::{LogitRows, SublayerKind, SublayerTag, Transformer};
