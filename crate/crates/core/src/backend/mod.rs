//! Model access behind three capabilities: candidate generation, continuation
//! likelihood estimation, and text embedding.
//!
//! Implementations:
//! - [`http::OpenAiBackend`]: OpenAI-compatible HTTP endpoints.
//! - [`oracle::JointOracle`]: explicit finite joint distribution, exact conditionals.
//! - [`synthetic::NoiseModelBackend`]: simulated LLM for the bundled synthetic tasks.
//! - [`fixture::FixtureBackend`] / [`fixture::Recorder`]: replay and capture.
//! - [`cache::Cached`]: content-addressed response cache around any backend.
//! - [`mock`]: uniform-vocabulary scorer, hashing embedder, context-free wrapper.

pub mod cache;
pub mod fixture;
pub mod http;
pub mod mock;
pub mod oracle;
pub mod retry;
pub mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Candidate, TokenScore};

pub use retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("http status {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, body: String, attempts: u32 },
    #[error("{0}")]
    Unsupported(String),
    #[error("context window exceeded: {needed} tokens > {window}")]
    WindowOverflow { needed: usize, window: usize },
    #[error("unrecorded request {0}")]
    Unrecorded(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub(crate) fn with_attempts(self, n: u32) -> Self {
        match self {
            BackendError::Transport { message, .. } => BackendError::Transport { message, attempts: n },
            BackendError::Status { status, body, .. } => BackendError::Status {
                status,
                body,
                attempts: n,
            },
            other => other,
        }
    }

    pub fn no_generation() -> Self {
        BackendError::Unsupported("backend has no generation capability".into())
    }

    pub fn no_scoring() -> Self {
        BackendError::Unsupported("no echo-scoring support".into())
    }

    pub fn no_embedding() -> Self {
        BackendError::Unsupported("backend has no embedding capability".into())
    }
}

impl From<std::io::Error> for BackendError {
    fn from(e: std::io::Error) -> Self {
        BackendError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub context: String,
    pub num_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub want_logprobs: bool,
}

impl GenerationRequest {
    pub fn new(context: impl Into<String>, num_samples: usize, temperature: f64) -> Self {
        Self {
            context: context.into(),
            num_samples,
            temperature,
            max_tokens: 512,
            seed: None,
            want_logprobs: false,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.num_samples == 0 {
            return Err(BackendError::InvalidRequest("num_samples must be >= 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LikelihoodRequest {
    pub context: String,
    pub continuation: String,
    #[serde(default)]
    pub top_k_alternatives: usize,
}

impl LikelihoodRequest {
    pub fn new(context: impl Into<String>, continuation: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            continuation: continuation.into(),
            top_k_alternatives: 0,
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k_alternatives = k;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.continuation.is_empty() {
            return Err(BackendError::InvalidRequest("empty continuation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodResponse {
    pub token_scores: Vec<TokenScore>,
    pub tokenizer_id: String,
    #[serde(default)]
    pub truncated: bool,
}

impl LikelihoodResponse {
    pub fn total_logprob(&self) -> f64 {
        self.token_scores.iter().map(|t| t.logprob).sum()
    }

    /// Concatenated token texts.
    pub fn text(&self) -> String {
        self.token_scores.iter().map(|t| t.token.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub backend_id: String,
    pub model_id: String,
}

impl BackendInfo {
    pub fn new(backend_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            model_id: model_id.into(),
        }
    }
}

/// A model endpoint. Each capability defaults to a permanent "unsupported"
/// error, so implementations only override what they provide.
pub trait Backend: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn generate(&self, _req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        Err(BackendError::no_generation())
    }

    fn score_continuation(&self, _req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        Err(BackendError::no_scoring())
    }

    fn embed(&self, _text: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::no_embedding())
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        (**self).generate(req)
    }
    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        (**self).score_continuation(req)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        (**self).generate(req)
    }
    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        (**self).score_continuation(req)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

pub type SharedBackend = Arc<dyn Backend>;

/// The backends a selection run talks to.
#[derive(Clone)]
pub struct Backends {
    pub generator: SharedBackend,
    pub estimator: SharedBackend,
    pub embedder: Option<SharedBackend>,
    /// Generation and estimation are the same model, so generation-time
    /// logprobs may serve as the forward score.
    pub same_model: bool,
}

impl Backends {
    pub fn new(generator: SharedBackend, estimator: SharedBackend) -> Self {
        Self {
            generator,
            estimator,
            embedder: None,
            same_model: false,
        }
    }

    /// One backend for every role.
    pub fn single(backend: SharedBackend) -> Self {
        Self {
            generator: backend.clone(),
            estimator: backend.clone(),
            embedder: Some(backend),
            same_model: true,
        }
    }

    pub fn with_embedder(mut self, embedder: SharedBackend) -> Self {
        self.embedder = Some(embedder);
        self
    }
}

/// Splits text into tokens that each carry their leading whitespace, so the
/// tokens concatenate back to the input. Trailing whitespace joins the last
/// token.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut seen_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() && seen_word {
            out.push(std::mem::take(&mut cur));
            seen_word = false;
        }
        if !ch.is_whitespace() {
            seen_word = true;
        }
        cur.push(ch);
    }
    if !cur.is_empty() {
        if seen_word || out.is_empty() {
            out.push(cur);
        } else {
            out.last_mut().expect("non-empty").push_str(&cur);
        }
    }
    out
}
