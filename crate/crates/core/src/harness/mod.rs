//! Dataset I/O, synthetic suites, run configuration, evaluation reports and
//! token attribution.

pub mod attribution;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod open;
pub mod synth;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{0}: no records")]
    Empty(String),
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Attribution(String),
}
