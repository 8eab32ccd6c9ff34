//! Small deterministic backends for tests and offline runs.

use super::{Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse};
use crate::types::{Candidate, TokenScore};

/// Every character is a token and every token has logprob `ln(1/V)`.
#[derive(Debug, Clone)]
pub struct UniformMock {
    pub vocab: usize,
    /// Context window in tokens; `None` means unbounded.
    pub window: Option<usize>,
    pub allow_truncation: bool,
}

impl UniformMock {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            window: None,
            allow_truncation: false,
        }
    }
}

impl Backend for UniformMock {
    fn info(&self) -> BackendInfo {
        BackendInfo::new("uniform", format!("uniform-{}", self.vocab))
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        req.validate()?;
        let lp = (1.0 / self.vocab as f64).ln();
        let ctx_len = req.context.chars().count();
        let mut tokens: Vec<TokenScore> = req
            .continuation
            .chars()
            .map(|c| TokenScore::new(c.to_string(), lp))
            .collect();
        let mut truncated = false;
        if let Some(window) = self.window {
            let needed = ctx_len + tokens.len();
            if needed > window {
                if !self.allow_truncation {
                    return Err(BackendError::WindowOverflow { needed, window });
                }
                tokens.truncate(window.saturating_sub(ctx_len));
                truncated = true;
            }
        }
        Ok(LikelihoodResponse {
            token_scores: tokens,
            tokenizer_id: "chars".into(),
            truncated,
        })
    }
}

/// Feature-hashing embedder over lowercase words and character trigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn add(&self, v: &mut [f64], feature: &str) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Backend for HashingEmbedder {
    fn info(&self) -> BackendInfo {
        BackendInfo::new("hash-embed", format!("hash-{}", self.dim))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for w in lower.split_whitespace() {
            self.add(&mut v, &format!("w:{w}"));
        }
        let chars: Vec<char> = format!(" {lower} ").chars().collect();
        for tri in chars.windows(3) {
            self.add(&mut v, &format!("c:{}", tri.iter().collect::<String>()));
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        Ok(v)
    }
}

/// Wraps an estimator so that it ignores the context entirely: every
/// continuation is scored as if the context were empty.
pub struct ContextFree<B>(pub B);

impl<B: Backend> Backend for ContextFree<B> {
    fn info(&self) -> BackendInfo {
        let inner = self.0.info();
        BackendInfo::new(format!("{}+context-free", inner.backend_id), inner.model_id)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        self.0.generate(req)
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        self.0.score_continuation(&LikelihoodRequest {
            context: String::new(),
            ..req.clone()
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.0.embed(text)
    }
}
