//! Simulated LLM for the bundled synthetic tasks.
//!
//! Scores follow a constructed noise model:
//!
//! - forward channel (open query is a test query): total logprob
//!   `base_forward + sigma * eps`, with `eps ~ N(0, 1)` drawn from a hash of
//!   the query and continuation;
//! - backward channel (open query is a few-shot query): `base_backward`,
//!   lowered by `delta` when a demonstration pairs a test query with a
//!   response whose extracted answer is correct;
//! - prior channel (anything else, e.g. an empty context): `base_forward +
//!   sigma * eps` keyed on the continuation alone.
//!
//! Totals are split evenly over whitespace tokens, the last token absorbing
//! rounding so the tokens sum back to the total exactly. A correct candidate
//! thus has backward term `-delta` and final score `forward + delta`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    whitespace_tokens, Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse,
};
use crate::engine::extract::{canonical, AnswerExtractor};
use crate::prompt::{parse_context, DemonstrationTemplate};
use crate::types::{Candidate, TokenScore};

pub const TOKENIZER_ID: &str = "whitespace";

const OPENERS: [&str; 10] = [
    "Step by step:",
    "Let's work it out.",
    "Thinking carefully:",
    "First, look at the pieces.",
    "We reason as follows.",
    "Break it down:",
    "Consider each part.",
    "Working through it:",
    "Here is the reasoning.",
    "Carefully now:",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Arithmetic,
    Mapping,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "arithmetic" => Ok(TaskKind::Arithmetic),
            "mapping" => Ok(TaskKind::Mapping),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Arithmetic => "arithmetic",
            TaskKind::Mapping => "mapping",
        }
    }

    /// Chain-of-thought response ending in `The answer is <answer>.`
    pub fn render_response(self, stem: &str, answer: &str, opener: &str) -> String {
        let reasoning = match self {
            TaskKind::Arithmetic => format!("{stem} = {answer}."),
            TaskKind::Mapping => {
                let parts: Vec<String> = stem
                    .split_whitespace()
                    .zip(answer.split_whitespace())
                    .map(|(s, w)| format!("{s} means {w}"))
                    .collect();
                format!("{}.", parts.join(", "))
            }
        };
        format!("{opener} {reasoning} The answer is {answer}.")
    }
}

/// What the simulated model knows about one test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub stem: String,
    pub gold: String,
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub sigma: f64,
    pub delta: f64,
    /// Probability that a sampled candidate is correct.
    pub p_correct: f64,
    pub base_forward: f64,
    pub base_backward: f64,
    pub answer_marker: String,
    pub template: DemonstrationTemplate,
    /// Keyed by test query text.
    pub tasks: BTreeMap<String, TaskEntry>,
}

pub struct NoiseModelBackend {
    spec: NoiseModelSpec,
    extractor: AnswerExtractor,
}

impl NoiseModelBackend {
    pub fn new(spec: NoiseModelSpec) -> Result<Self, BackendError> {
        if !(spec.sigma >= 0.0 && spec.delta >= 0.0) || !(0.0..=1.0).contains(&spec.p_correct) {
            return Err(BackendError::InvalidRequest(
                "sigma, delta must be >= 0 and p_correct in [0, 1]".into(),
            ));
        }
        spec.template
            .validate()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let extractor = AnswerExtractor::marker(spec.answer_marker.clone());
        Ok(Self { spec, extractor })
    }

    pub fn spec(&self) -> &NoiseModelSpec {
        &self.spec
    }

    fn noise(&self, parts: &[&str]) -> f64 {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        ChaCha8Rng::seed_from_u64(seed).sample(StandardNormal)
    }

    fn is_correct(&self, test_query: &str, response: &str) -> bool {
        match (self.spec.tasks.get(test_query), self.extractor.extract(response)) {
            (Some(task), Some(ans)) => canonical(&ans) == canonical(&task.gold),
            _ => false,
        }
    }

    fn total_logprob(&self, context: &str, continuation: &str) -> f64 {
        let Some(parsed) = parse_context(context, &self.spec.template) else {
            return self.spec.base_forward + self.spec.sigma * self.noise(&["prior", continuation]);
        };
        if self.spec.tasks.contains_key(&parsed.open_query) {
            return self.spec.base_forward
                + self.spec.sigma * self.noise(&["forward", &parsed.open_query, continuation]);
        }
        let correct = parsed
            .demonstrations
            .iter()
            .any(|(q, a)| self.spec.tasks.contains_key(q) && self.is_correct(q, a));
        self.spec.base_backward - if correct { self.spec.delta } else { 0.0 }
    }

    fn token_scores(&self, context: &str, continuation: &str, top_k: usize) -> Vec<TokenScore> {
        let total = self.total_logprob(context, continuation);
        let toks = whitespace_tokens(continuation);
        let n = toks.len();
        let per = (total / n as f64).min(0.0);
        // the last token takes the remainder so the left-to-right sum is `total`
        let head: f64 = (0..n.saturating_sub(1)).map(|_| per).sum();
        let last = (total - head).min(0.0);
        toks.into_iter()
            .enumerate()
            .map(|(j, t)| {
                let lp = if j + 1 == n { last } else { per };
                let top_alternatives = (top_k > 0).then(|| {
                    let mut alts = vec![(t.clone(), lp), ("<other>".to_string(), (-lp.exp()).ln_1p())];
                    alts.sort_by(|a, b| b.1.total_cmp(&a.1));
                    alts.truncate(top_k);
                    alts
                });
                TokenScore {
                    token: t,
                    logprob: lp,
                    top_alternatives,
                }
            })
            .collect()
    }
}

impl Backend for NoiseModelBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo::new(
            "synthetic",
            format!(
                "noise-{}-seed{}-sigma{}-delta{}-p{}",
                self.spec.kind.as_str(),
                self.spec.seed,
                self.spec.sigma,
                self.spec.delta,
                self.spec.p_correct
            ),
        )
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        req.validate()?;
        let parsed = parse_context(&req.context, &self.spec.template)
            .ok_or_else(|| BackendError::InvalidRequest("context does not match the task template".into()))?;
        let task = self
            .spec
            .tasks
            .get(&parsed.open_query)
            .ok_or_else(|| BackendError::InvalidRequest(format!("unknown test query {:?}", parsed.open_query)))?;
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update(req.seed.unwrap_or(0).to_le_bytes());
        h.update(parsed.open_query.as_bytes());
        let seed = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct openers keep every candidate text unique within a query
        let mut order: Vec<usize> = (0..OPENERS.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        (0..req.num_samples)
            .map(|k| {
                let correct = task.distractors.is_empty() || rng.random::<f64>() < self.spec.p_correct;
                let answer = if correct {
                    &task.gold
                } else {
                    &task.distractors[rng.random_range(0..task.distractors.len())]
                };
                let mut opener = OPENERS[order[k % OPENERS.len()]].to_string();
                if k >= OPENERS.len() {
                    opener = format!("{opener} (attempt {})", k + 1);
                }
                let text = self.spec.kind.render_response(&task.stem, answer, &opener);
                let mut c = Candidate::new(k, text).map_err(|e| BackendError::Protocol(e.to_string()))?;
                if req.want_logprobs {
                    c.gen_token_logprobs = Some(self.token_scores(&req.context, &c.response, 0));
                }
                Ok(c)
            })
            .collect()
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        req.validate()?;
        Ok(LikelihoodResponse {
            token_scores: self.token_scores(&req.context, &req.continuation, req.top_k_alternatives),
            tokenizer_id: TOKENIZER_ID.into(),
            truncated: false,
        })
    }
}
