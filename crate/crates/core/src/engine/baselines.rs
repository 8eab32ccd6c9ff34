//! Comparison selectors: random pick, majority vote, CoT-WP confidence gap,
//! and the USC prompt judge.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;

use super::extract::canonical;
use super::{at, Cause, Engine, EngineError, Phase, Selector, TaskInstance};
use crate::backend::GenerationRequest;
use crate::prompt::{self, ScoringContext};
use crate::score;
use crate::types::{Candidate, SelectionResult, TokenScore};

/// Judge instructions; candidates follow, labelled from 0.
pub const USC_JUDGE_INSTRUCTIONS: &str = "I have generated the following responses to the question below. \
Evaluate these responses and select the most consistent one based on majority consensus.";

fn unscored(engine: &Engine, selector: Selector, candidates: &[Candidate], selected: usize) -> SelectionResult {
    SelectionResult {
        selected_index: selected,
        candidates: candidates.to_vec(),
        breakdowns: Vec::new(),
        baseline_scores: None,
        tie_broken: false,
        metadata: engine.metadata(&selector),
    }
}

fn require_candidates(candidates: &[Candidate]) -> Result<(), EngineError> {
    if candidates.is_empty() {
        return Err(EngineError::new(
            Phase::Baseline,
            None,
            Cause::Score(crate::error::ScoreError::EmptyScores),
        ));
    }
    Ok(())
}

/// Uniform choice from a seeded ChaCha8 stream.
pub fn random_index(k: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..k)
}

pub fn random(engine: &Engine, candidates: &[Candidate], seed: u64) -> Result<SelectionResult, EngineError> {
    require_candidates(candidates)?;
    let idx = random_index(candidates.len(), seed);
    Ok(unscored(engine, Selector::Random { seed }, candidates, idx))
}

/// Index of the first candidate carrying the most frequent answer. Count ties
/// go to the answer seen first; `None` entries abstain.
pub fn majority_index(answers: &[Option<String>]) -> Option<usize> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        if let Some(a) = a {
            counts.entry(a.as_str()).or_insert((0, i)).0 += 1;
        }
    }
    counts
        .values()
        .max_by(|(c1, f1), (c2, f2)| c1.cmp(c2).then(f2.cmp(f1)))
        .map(|&(_, first)| first)
}

pub fn majority_vote(engine: &Engine, candidates: &[Candidate]) -> Result<SelectionResult, EngineError> {
    require_candidates(candidates)?;
    let answers: Vec<Option<String>> = candidates
        .iter()
        .map(|c| engine.extractor().extract(&c.response).map(|a| canonical(&a)))
        .collect();
    let idx = majority_index(&answers).ok_or(EngineError::new(Phase::Baseline, None, Cause::AllAbstained))?;
    let mut r = unscored(engine, Selector::Majority, candidates, idx);
    let winner = answers[idx].as_deref().unwrap_or_default();
    r.tie_broken = {
        let count = |w: &str| answers.iter().filter(|a| a.as_deref() == Some(w)).count();
        let top = count(winner);
        answers.iter().flatten().any(|a| a != winner && count(a) == top)
    };
    r.metadata.insert("majority_answer".into(), winner.to_string());
    Ok(r)
}

/// Tokens whose byte range overlaps `span`.
pub fn tokens_in_span<'a>(tokens: &'a [TokenScore], span: &Range<usize>) -> &'a [TokenScore] {
    let mut pos = 0;
    let (mut lo, mut hi) = (None, 0);
    for (i, t) in tokens.iter().enumerate() {
        let r = pos..pos + t.token.len();
        pos = r.end;
        if r.start < span.end && span.start < r.end {
            lo.get_or_insert(i);
            hi = i + 1;
        }
    }
    lo.map_or(&tokens[..0], |lo| &tokens[lo..hi])
}

pub fn cotwp(engine: &Engine, task: &TaskInstance, candidates: &[Candidate]) -> Result<SelectionResult, EngineError> {
    require_candidates(candidates)?;
    let scores = engine.install(|| {
        candidates
            .par_iter()
            .map(|c| cotwp_candidate(engine, task, c))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
    })?;
    // excluded candidates sit below every finite score
    let ranked: Vec<f64> = scores.iter().map(|s| s.unwrap_or(f64::NEG_INFINITY)).collect();
    let best = ranked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(EngineError::new(Phase::Baseline, None, Cause::AllExcluded));
    }
    let idx = ranked.iter().position(|&s| s == best).expect("max present");
    let tie_broken = ranked.iter().filter(|&&s| s == best).count() > 1;
    let mut r = unscored(engine, Selector::CotWp, candidates, idx);
    r.baseline_scores = Some(scores);
    r.tie_broken = tie_broken;
    Ok(r)
}

fn cotwp_candidate(engine: &Engine, task: &TaskInstance, c: &Candidate) -> Result<Option<f64>, EngineError> {
    let k = Some(c.index);
    let Some(span) = engine.extractor().span(&c.response) else {
        return Ok(None);
    };
    let ctx: ScoringContext =
        prompt::build_forward_context(&task.few_shot, &task.test_query, &c.response, &engine.config().template)
            .map_err(at(Phase::Baseline, k))?;
    let resp = engine.score_context(&ctx, 2, Phase::Baseline, k)?;
    let toks = tokens_in_span(&resp.token_scores, &span);
    if toks.is_empty() {
        return Ok(None);
    }
    score::cotwp_score(toks).map(Some).map_err(at(Phase::Baseline, k))
}

/// Judge prompt listing every candidate as "Response i".
pub fn usc_prompt(test_query: &str, candidates: &[Candidate]) -> String {
    let mut s = format!("{USC_JUDGE_INSTRUCTIONS}\n\nQuestion: {test_query}\n\n");
    for (i, c) in candidates.iter().enumerate() {
        s.push_str(&format!("Response {i}:\n{}\n\n", c.response));
    }
    s.push_str(&format!(
        "Reply with the index (0 to {}) of the most consistent response.\nThe most consistent response is Response",
        candidates.len() - 1
    ));
    s
}

/// First integer in the judge output, if it indexes a candidate.
pub fn parse_judge_index(raw: &str, k: usize) -> Option<usize> {
    let re = Regex::new(r"\d+").expect("static regex");
    re.find(raw)?.as_str().parse::<usize>().ok().filter(|&i| i < k)
}

pub fn usc(engine: &Engine, task: &TaskInstance, candidates: &[Candidate]) -> Result<SelectionResult, EngineError> {
    require_candidates(candidates)?;
    let req = GenerationRequest {
        context: usc_prompt(&task.test_query, candidates),
        num_samples: 1,
        temperature: 0.0,
        max_tokens: 16,
        seed: engine.config().seed,
        want_logprobs: false,
    };
    let out = engine
        .backends()
        .generator
        .generate(&req)
        .map_err(at(Phase::Baseline, None))?;
    let raw = out.into_iter().next().map(|c| c.response).unwrap_or_default();
    let idx = parse_judge_index(&raw, candidates.len())
        .ok_or_else(|| EngineError::new(Phase::Baseline, None, Cause::JudgeParse { raw: raw.clone() }))?;
    let mut r = unscored(engine, Selector::Usc, candidates, idx);
    r.metadata.insert("judge_output".into(), raw);
    Ok(r)
}
