//! End-to-end selection: generate K candidates, score each with forward and
//! backward terms, combine, pick the argmax. Also hosts the baseline
//! selectors and the ablation modes.
//!
//! Per-candidate scoring fans out over a bounded thread pool; results are
//! collected in candidate order, so selection never depends on scheduling.

pub mod baselines;
pub mod extract;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends, GenerationRequest, LikelihoodRequest, LikelihoodResponse};
use crate::error::{PromptError, RetrievalError, ScoreError, TypeError};
use crate::prompt::{self, DemonstrationTemplate, ScoringContext};
use crate::retrieval::{ExampleIndex, RelevanceResult};
use crate::score::{self, FloorPolicy};
use crate::types::{Candidate, Example, ExampleBackward, FewShotSet, ScoreBreakdown, SelectionResult, TokenScore};

use extract::{AnswerExtractor, DEFAULT_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    /// Mean over all N leave-one-out terms.
    Full,
    /// Single most relevant example.
    #[default]
    Approx,
    /// Forward-only ablation.
    None,
    /// Backward-only ablation (single-example term, final = -backward).
    BackwardOnly,
}

impl std::str::FromStr for BackwardMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(BackwardMode::Full),
            "approx" => Ok(BackwardMode::Approx),
            "none" | "forward" => Ok(BackwardMode::None),
            "backward" | "backward-only" => Ok(BackwardMode::BackwardOnly),
            other => Err(format!("unknown backward mode {other:?}")),
        }
    }
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardMode::Full => "full",
            BackwardMode::Approx => "approx",
            BackwardMode::None => "none",
            BackwardMode::BackwardOnly => "backward-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub backward_mode: BackwardMode,
    pub k: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub template: DemonstrationTemplate,
    /// Marker string for the default answer extractor.
    pub answer_marker: String,
    /// Regex overriding the marker; capture group 1 is the answer.
    pub answer_pattern: Option<String>,
    /// Replace `-inf` token logprobs with this floor instead of failing.
    pub logprob_floor: Option<f64>,
    pub length_normalize: bool,
    pub seed: Option<u64>,
    /// Keep the task header in backward contexts.
    pub backward_header: bool,
    pub max_concurrency: usize,
    /// Keep per-token scores in breakdowns.
    pub retain_tokens: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backward_mode: BackwardMode::Approx,
            k: 5,
            temperature: 1.0,
            max_tokens: 512,
            template: DemonstrationTemplate::default(),
            answer_marker: DEFAULT_MARKER.into(),
            answer_pattern: None,
            logprob_floor: None,
            length_normalize: false,
            seed: None,
            backward_header: true,
            max_concurrency: 8,
            retain_tokens: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let cfg = |m: &str| EngineError::new(Phase::Config, None, Cause::Config(m.into()));
        if self.k == 0 {
            return Err(cfg("k must be >= 1"));
        }
        if self.max_concurrency == 0 {
            return Err(cfg("max_concurrency must be >= 1"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(cfg("temperature must be >= 0"));
        }
        if self.logprob_floor.is_some_and(|f| !f.is_finite() || f > 0.0) {
            return Err(cfg("logprob_floor must be finite and <= 0"));
        }
        self.template
            .validate()
            .map_err(|e| EngineError::new(Phase::Config, None, e.into()))?;
        self.extractor()?;
        Ok(())
    }

    pub fn extractor(&self) -> Result<AnswerExtractor, EngineError> {
        match &self.answer_pattern {
            Some(p) => AnswerExtractor::pattern(p)
                .map_err(|e| EngineError::new(Phase::Config, None, Cause::Config(e.to_string()))),
            None => Ok(AnswerExtractor::marker(self.answer_marker.clone())),
        }
    }

    fn floor(&self) -> FloorPolicy {
        self.logprob_floor.map_or(FloorPolicy::Reject, FloorPolicy::Floor)
    }
}

/// One test query with its demonstrations. `gold` is for evaluation only
/// and never enters a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub few_shot: FewShotSet,
    pub test_query: String,
    #[serde(default)]
    pub gold: Option<String>,
}

impl TaskInstance {
    pub fn new(few_shot: FewShotSet, test_query: impl Into<String>) -> Self {
        Self {
            few_shot,
            test_query: test_query.into(),
            gold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Config,
    Generation,
    Forward,
    Retrieval,
    Backward,
    Combine,
    Baseline,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("phase serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Error)]
pub enum Cause {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("estimator truncated the continuation")]
    Truncated,
    #[error("scored tokens do not reconstruct the continuation")]
    TokenMismatch,
    #[error("expected {expected} candidates, backend returned {got}")]
    CandidateCount { expected: usize, got: usize },
    #[error("no embedder configured for approximate backward scoring")]
    NoEmbedder,
    #[error("judge parse failure: {raw:?}")]
    JudgeParse { raw: String },
    #[error("no candidate yielded an extractable answer")]
    AllAbstained,
    #[error("answer span not found in any candidate")]
    AllExcluded,
    #[error("invalid config: {0}")]
    Config(String),
}

/// A failed selection, naming the phase and (when applicable) the candidate.
#[derive(Debug, Error)]
pub struct EngineError {
    pub phase: Phase,
    pub candidate: Option<usize>,
    #[source]
    pub cause: Cause,
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} phase failed", self.phase)?;
        if let Some(c) = self.candidate {
            write!(f, " on candidate {c}")?;
        }
        write!(f, ": {}", self.cause)
    }
}

impl EngineError {
    pub fn new(phase: Phase, candidate: Option<usize>, cause: Cause) -> Self {
        Self {
            phase,
            candidate,
            cause,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(&self.cause, Cause::Backend(e) if e.is_retryable())
    }
}

fn at<E: Into<Cause>>(phase: Phase, candidate: Option<usize>) -> impl FnOnce(E) -> EngineError {
    move |e| EngineError::new(phase, candidate, e.into())
}

/// Which selector to apply to a candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Forward and backward scores, combined per the configured mode.
    Referi(BackwardMode),
    Random {
        seed: u64,
    },
    Majority,
    CotWp,
    Usc,
}

impl Selector {
    pub fn name(&self) -> String {
        match self {
            Selector::Referi(BackwardMode::None) => "forward".into(),
            Selector::Referi(BackwardMode::BackwardOnly) => "backward".into(),
            Selector::Referi(m) => format!("referi-{m}"),
            Selector::Random { .. } => "random".into(),
            Selector::Majority => "majority".into(),
            Selector::CotWp => "cotwp".into(),
            Selector::Usc => "usc".into(),
        }
    }
}

pub struct Engine {
    cfg: EngineConfig,
    backends: Backends,
    pool: rayon::ThreadPool,
    extractor: AnswerExtractor,
    index: Mutex<Option<(FewShotSet, Arc<ExampleIndex>)>>,
}

struct Unconditioned {
    total: f64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, backends: Backends) -> Result<Self, EngineError> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_concurrency)
            .build()
            .map_err(|e| EngineError::new(Phase::Config, None, Cause::Config(e.to_string())))?;
        let extractor = cfg.extractor()?;
        Ok(Self {
            cfg,
            backends,
            pool,
            extractor,
            index: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn extractor(&self) -> &AnswerExtractor {
        &self.extractor
    }

    /// Runs `f` on the engine's bounded pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    fn metadata(&self, selector: &Selector) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("selector".into(), selector.name());
        let g = self.backends.generator.info();
        let e = self.backends.estimator.info();
        m.insert("generator".into(), format!("{}/{}", g.backend_id, g.model_id));
        m.insert("estimator".into(), format!("{}/{}", e.backend_id, e.model_id));
        if let Some(emb) = &self.backends.embedder {
            let i = emb.info();
            m.insert("embedder".into(), format!("{}/{}", i.backend_id, i.model_id));
        }
        if let Some(s) = self.cfg.seed {
            m.insert("seed".into(), s.to_string());
        }
        m
    }

    /// Samples K candidates for the task (temperature and K from config).
    pub fn generate(&self, task: &TaskInstance, seed: Option<u64>) -> Result<Vec<Candidate>, EngineError> {
        let err = at(Phase::Generation, None);
        let context =
            prompt::build_generation_context(&task.few_shot, &task.test_query, &self.cfg.template).map_err(err)?;
        let req = GenerationRequest {
            context,
            num_samples: self.cfg.k,
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
            seed: seed.or(self.cfg.seed),
            want_logprobs: self.backends.same_model,
        };
        let mut cands = self
            .backends
            .generator
            .generate(&req)
            .map_err(at(Phase::Generation, None))?;
        if cands.len() != self.cfg.k {
            return Err(EngineError::new(
                Phase::Generation,
                None,
                Cause::CandidateCount {
                    expected: self.cfg.k,
                    got: cands.len(),
                },
            ));
        }
        for (k, c) in cands.iter_mut().enumerate() {
            c.index = k;
            c.validate().map_err(at(Phase::Generation, Some(k)))?;
        }
        Ok(cands)
    }

    /// Scores one context through the estimator, rejecting truncated or
    /// non-reconstructing responses.
    pub(crate) fn score_context(
        &self,
        ctx: &ScoringContext,
        top_k: usize,
        phase: Phase,
        candidate: Option<usize>,
    ) -> Result<LikelihoodResponse, EngineError> {
        let req = LikelihoodRequest {
            context: ctx.context.clone(),
            continuation: ctx.continuation.clone(),
            top_k_alternatives: top_k,
        };
        let resp = self
            .backends
            .estimator
            .score_continuation(&req)
            .map_err(at(phase, candidate))?;
        if resp.truncated {
            return Err(EngineError::new(phase, candidate, Cause::Truncated));
        }
        if resp.text() != ctx.continuation {
            return Err(EngineError::new(phase, candidate, Cause::TokenMismatch));
        }
        Ok(resp)
    }

    fn sum_tokens(&self, toks: &[TokenScore], phase: Phase, candidate: Option<usize>) -> Result<f64, EngineError> {
        score::forward_score_with(toks, self.cfg.floor(), false).map_err(at(phase, candidate))
    }

    /// Most relevant example for the test query; few-shot embeddings are
    /// computed once per few-shot set.
    pub fn relevant_example(&self, task: &TaskInstance) -> Result<RelevanceResult, EngineError> {
        let err = || EngineError::new(Phase::Retrieval, None, Cause::NoEmbedder);
        let embedder = self.backends.embedder.as_ref().ok_or_else(err)?;
        let idx = {
            let mut guard = self.index.lock().expect("index lock");
            match guard.as_ref() {
                Some((set, idx)) if set == &task.few_shot => idx.clone(),
                _ => {
                    let idx = Arc::new(
                        ExampleIndex::build(&task.few_shot, embedder.as_ref()).map_err(at(Phase::Retrieval, None))?,
                    );
                    *guard = Some((task.few_shot.clone(), idx.clone()));
                    idx
                }
            }
        };
        idx.most_relevant(&task.test_query, embedder.as_ref())
            .map_err(at(Phase::Retrieval, None))
    }

    fn backward_template(&self) -> DemonstrationTemplate {
        if self.cfg.backward_header {
            self.cfg.template.clone()
        } else {
            self.cfg.template.without_header()
        }
    }

    fn forward_term(&self, task: &TaskInstance, cand: &Candidate) -> Result<(f64, Vec<TokenScore>), EngineError> {
        let k = Some(cand.index);
        let toks = match (&cand.gen_token_logprobs, self.backends.same_model) {
            (Some(toks), true) => toks.clone(),
            _ => {
                let ctx =
                    prompt::build_forward_context(&task.few_shot, &task.test_query, &cand.response, &self.cfg.template)
                        .map_err(at(Phase::Forward, k))?;
                self.score_context(&ctx, 0, Phase::Forward, k)?.token_scores
            }
        };
        let fwd = score::forward_score_with(&toks, self.cfg.floor(), self.cfg.length_normalize)
            .map_err(at(Phase::Forward, k))?;
        Ok((fwd, toks))
    }

    fn backward_terms(
        &self,
        task: &TaskInstance,
        cand: &Candidate,
        indices: &[usize],
        uncond: &BTreeMap<usize, Unconditioned>,
    ) -> Result<Vec<ExampleBackward>, EngineError> {
        let k = Some(cand.index);
        let pair = Example::new(task.test_query.clone(), cand.response.clone()).map_err(at(Phase::Backward, k))?;
        let tpl = self.backward_template();
        indices
            .iter()
            .map(|&i| {
                let (cond, _) =
                    prompt::build_backward_contexts(&task.few_shot, i, &pair, &tpl).map_err(at(Phase::Backward, k))?;
                let resp = self.score_context(&cond, 0, Phase::Backward, k)?;
                Ok(ExampleBackward {
                    example_index: i,
                    conditioned_logprob: self.sum_tokens(&resp.token_scores, Phase::Backward, k)?,
                    unconditioned_logprob: uncond[&i].total,
                    conditioned_tokens: self.cfg.retain_tokens.then_some(resp.token_scores),
                })
            })
            .collect()
    }

    fn unconditioned_terms(
        &self,
        task: &TaskInstance,
        indices: &[usize],
    ) -> Result<BTreeMap<usize, Unconditioned>, EngineError> {
        let tpl = self.backward_template();
        // the unconditioned context does not depend on the candidate; any pair works
        let placeholder = Example::new(task.test_query.clone(), "-").map_err(at(Phase::Backward, None))?;
        indices
            .par_iter()
            .map(|&i| {
                let (_, u) = prompt::build_backward_contexts(&task.few_shot, i, &placeholder, &tpl)
                    .map_err(at(Phase::Backward, None))?;
                let resp = self.score_context(&u, 0, Phase::Backward, None)?;
                let total = self.sum_tokens(&resp.token_scores, Phase::Backward, None)?;
                Ok((i, Unconditioned { total }))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().collect())
    }

    fn breakdown(
        &self,
        task: &TaskInstance,
        cand: &Candidate,
        mode: BackwardMode,
        indices: &[usize],
        uncond: &BTreeMap<usize, Unconditioned>,
    ) -> Result<ScoreBreakdown, EngineError> {
        let k = Some(cand.index);
        let (forward, fwd_tokens) = match mode {
            BackwardMode::BackwardOnly => (0.0, None),
            _ => {
                let (f, t) = self.forward_term(task, cand)?;
                (f, self.cfg.retain_tokens.then_some(t))
            }
        };
        let mut b = ScoreBreakdown {
            forward,
            backward_full: None,
            backward_approx: None,
            final_score: forward,
            per_example_backward: None,
            forward_tokens: fwd_tokens,
        };
        if mode == BackwardMode::None {
            return Ok(b);
        }
        let terms = self.backward_terms(task, cand, indices, uncond)?;
        let combine = at(Phase::Combine, k);
        let backward = match mode {
            BackwardMode::Full => {
                let pairs: Vec<(f64, f64)> = terms
                    .iter()
                    .map(|t| (t.conditioned_logprob, t.unconditioned_logprob))
                    .collect();
                let v = score::backward_full_score(&pairs).map_err(combine)?;
                b.backward_full = Some(v);
                v
            }
            _ => {
                let t = &terms[0];
                let v =
                    score::backward_approx_score(t.conditioned_logprob, t.unconditioned_logprob).map_err(combine)?;
                b.backward_approx = Some(v);
                v
            }
        };
        if task.few_shot.len() == 1 {
            // the full mean and the relevant-example term are the same number
            b.backward_full = Some(backward);
            b.backward_approx = Some(backward);
        }
        b.final_score = score::final_score(forward, backward).map_err(at(Phase::Combine, k))?;
        b.per_example_backward = Some(terms);
        Ok(b)
    }

    /// Scores the given candidates with forward/backward terms and selects.
    pub fn score_candidates(
        &self,
        task: &TaskInstance,
        candidates: &[Candidate],
        mode: BackwardMode,
    ) -> Result<SelectionResult, EngineError> {
        if candidates.is_empty() {
            return Err(EngineError::new(
                Phase::Combine,
                None,
                Cause::Score(ScoreError::EmptyScores),
            ));
        }
        let mut metadata = self.metadata(&Selector::Referi(mode));
        metadata.insert("backward_mode".into(), mode.to_string());
        let indices: Vec<usize> = match mode {
            BackwardMode::None => vec![],
            BackwardMode::Full => (0..task.few_shot.len()).collect(),
            BackwardMode::Approx | BackwardMode::BackwardOnly => {
                let rel = self.relevant_example(task)?;
                metadata.insert("relevant_example".into(), rel.selected_index.to_string());
                vec![rel.selected_index]
            }
        };
        let results = self.pool.install(|| {
            let uncond = self.unconditioned_terms(task, &indices)?;
            candidates
                .par_iter()
                .map(|c| self.breakdown(task, c, mode, &indices, &uncond))
                .collect::<Vec<_>>()
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
        })?;
        let finals: Vec<f64> = results.iter().map(|b| b.final_score).collect();
        let (selected_index, tie_broken) = score::select_argmax(&finals).map_err(at(Phase::Combine, None))?;
        Ok(SelectionResult {
            selected_index,
            candidates: candidates.to_vec(),
            breakdowns: results,
            baseline_scores: None,
            tie_broken,
            metadata,
        })
    }

    /// Applies `selector` to an existing candidate pool.
    pub fn select(
        &self,
        selector: Selector,
        task: &TaskInstance,
        candidates: &[Candidate],
    ) -> Result<SelectionResult, EngineError> {
        match selector {
            Selector::Referi(mode) => self.score_candidates(task, candidates, mode),
            Selector::Random { seed } => baselines::random(self, candidates, seed),
            Selector::Majority => baselines::majority_vote(self, candidates),
            Selector::CotWp => baselines::cotwp(self, task, candidates),
            Selector::Usc => baselines::usc(self, task, candidates),
        }
    }

    pub fn run_referi(&self, task: &TaskInstance) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        self.score_candidates(task, &cands, self.cfg.backward_mode)
    }

    pub fn run_forward_only(&self, task: &TaskInstance) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        self.score_candidates(task, &cands, BackwardMode::None)
    }

    pub fn run_random_baseline(&self, task: &TaskInstance, seed: u64) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        baselines::random(self, &cands, seed)
    }

    pub fn run_majority_vote(&self, task: &TaskInstance) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        baselines::majority_vote(self, &cands)
    }

    pub fn run_cotwp_baseline(&self, task: &TaskInstance) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        baselines::cotwp(self, task, &cands)
    }

    pub fn run_usc_baseline(&self, task: &TaskInstance) -> Result<SelectionResult, EngineError> {
        let cands = self.generate(task, None)?;
        baselines::usc(self, task, &cands)
    }
}
