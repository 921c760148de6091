// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command line front end and HTTP service for the `entlens` toolkit.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod serve;

use std::fmt;

use serde::Serialize;

/// Exit code for invalid arguments, configuration or inputs.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }

    /// `{"error": {"kind": …, "message": …}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<entlens::Error> for CliError {
    fn from(e: entlens::Error) -> Self {
        use entlens::Error as E;
        let kind = match &e {
            E::Io { .. }
            | E::Json(_)
            | E::Corpus { .. }
            | E::Config(_)
            | E::Dataset(_)
            | E::EmptyInput(_)
            | E::LayerOutOfRange { .. }
            | E::PositionOutOfRange { .. }
            | E::UnknownModel(_)
            | E::ContextOverflow { .. }
            | E::CacheMiss(_) => ErrorKind::Validation,
            _ => ErrorKind::Runtime,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}
