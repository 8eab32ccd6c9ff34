//! Pure score arithmetic: forward confidence, backward consistency (full and
//! single-example), the combined selection score, and argmax selection.
//!
//! Everything here works in natural-log space with `f64`. Nothing in this
//! module exponentiates except [`cotwp_score`], which is defined on
//! probabilities.

use crate::error::ScoreError;
use crate::types::TokenScore;

/// Default per-token floor applied when a lossy backend returns `-inf`.
pub const DEFAULT_LOGPROB_FLOOR: f64 = -100.0;

/// How non-finite token logprobs are handled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum FloorPolicy {
    /// Reject any non-finite logprob.
    #[default]
    Reject,
    /// Replace `-inf` with the given floor. `NaN` and `+inf` are still rejected.
    Floor(f64),
}

impl FloorPolicy {
    fn apply(self, lp: f64) -> Result<f64, ScoreError> {
        match self {
            FloorPolicy::Reject if !lp.is_finite() => Err(ScoreError::NonFiniteLogprob),
            FloorPolicy::Floor(floor) if lp == f64::NEG_INFINITY => Ok(floor),
            _ if !lp.is_finite() => Err(ScoreError::NonFiniteLogprob),
            _ => Ok(lp),
        }
    }
}

fn finite(v: f64) -> Result<f64, ScoreError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ScoreError::NonFinite)
    }
}

/// Sum of continuation token logprobs (unnormalized).
pub fn forward_score(tokens: &[TokenScore]) -> Result<f64, ScoreError> {
    forward_score_with(tokens, FloorPolicy::Reject, false)
}

/// [`forward_score`] with an explicit floor policy and optional division by
/// the token count.
pub fn forward_score_with(
    tokens: &[TokenScore],
    floor: FloorPolicy,
    length_normalize: bool,
) -> Result<f64, ScoreError> {
    if tokens.is_empty() {
        return Err(ScoreError::EmptyResponse);
    }
    let mut total = 0.0;
    for t in tokens {
        total += floor.apply(t.logprob)?;
    }
    if length_normalize {
        total /= tokens.len() as f64;
    }
    Ok(total)
}

/// Mean over examples of `conditioned - unconditioned`.
pub fn backward_full_score(per_example: &[(f64, f64)]) -> Result<f64, ScoreError> {
    if per_example.is_empty() {
        return Err(ScoreError::EmptyExamples);
    }
    let mut total = 0.0;
    for &(cond, uncond) in per_example {
        total += finite(cond)? - finite(uncond)?;
    }
    Ok(total / per_example.len() as f64)
}

/// Gain for the single most relevant example. No averaging factor.
pub fn backward_approx_score(conditioned: f64, unconditioned: f64) -> Result<f64, ScoreError> {
    Ok(finite(conditioned)? - finite(unconditioned)?)
}

pub fn final_score(forward: f64, backward: f64) -> Result<f64, ScoreError> {
    Ok(finite(forward)? - finite(backward)?)
}

/// Returns the lowest index attaining the maximum and whether that maximum
/// is shared by another index.
pub fn select_argmax(scores: &[f64]) -> Result<(usize, bool), ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::EmptyScores);
    }
    let mut best = 0usize;
    let mut tied = false;
    for (i, &s) in scores.iter().enumerate() {
        finite(s)?;
        if i == 0 {
            continue;
        }
        if s > scores[best] {
            best = i;
            tied = false;
        } else if s == scores[best] {
            tied = true;
        }
    }
    Ok((best, tied))
}

/// Mean top-1 minus top-2 probability gap over answer-span tokens.
pub fn cotwp_score(answer_tokens: &[TokenScore]) -> Result<f64, ScoreError> {
    if answer_tokens.is_empty() {
        return Err(ScoreError::EmptyResponse);
    }
    let mut total = 0.0;
    for t in answer_tokens {
        let alts = t
            .top_alternatives
            .as_deref()
            .filter(|a| a.len() >= 2)
            .ok_or(ScoreError::InsufficientTopK)?;
        let p1 = finite(alts[0].1)?.exp();
        let p2 = if alts[1].1 == f64::NEG_INFINITY {
            0.0
        } else {
            finite(alts[1].1)?.exp()
        };
        total += p1 - p2;
    }
    Ok(total / answer_tokens.len() as f64)
}
