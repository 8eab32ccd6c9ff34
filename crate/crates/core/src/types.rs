//! Value types shared across the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TypeError;

/// One few-shot demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub query: String,
    pub answer: String,
}

impl Example {
    pub fn new(query: impl Into<String>, answer: impl Into<String>) -> Result<Self, TypeError> {
        let ex = Self {
            query: query.into(),
            answer: answer.into(),
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.query.trim().is_empty() {
            return Err(TypeError::EmptyField("query"));
        }
        if self.answer.trim().is_empty() {
            return Err(TypeError::EmptyField("answer"));
        }
        Ok(())
    }
}

/// Ordered, non-empty list of demonstrations. Order is significant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Example>", into = "Vec<Example>")]
pub struct FewShotSet(Vec<Example>);

impl FewShotSet {
    pub fn new(examples: Vec<Example>) -> Result<Self, TypeError> {
        if examples.is_empty() {
            return Err(TypeError::EmptyFewShot);
        }
        for ex in &examples {
            ex.validate()?;
        }
        Ok(Self(examples))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn examples(&self) -> &[Example] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Option<&Example> {
        self.0.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.0.iter()
    }

    /// Keeps the first `n` examples (at least one).
    pub fn truncated(&self, n: usize) -> Self {
        Self(self.0[..n.clamp(1, self.0.len())].to_vec())
    }
}

impl TryFrom<Vec<Example>> for FewShotSet {
    type Error = TypeError;
    fn try_from(v: Vec<Example>) -> Result<Self, TypeError> {
        Self::new(v)
    }
}

impl From<FewShotSet> for Vec<Example> {
    fn from(s: FewShotSet) -> Self {
        s.0
    }
}

/// Logprob of one token, optionally with the top alternatives at that
/// position sorted by descending logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_alternatives: Option<Vec<(String, f64)>>,
}

impl TokenScore {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
            top_alternatives: None,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.logprob > 0.0 || self.logprob.is_nan() {
            return Err(TypeError::PositiveLogprob(self.logprob));
        }
        if let Some(alts) = &self.top_alternatives {
            if alts.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(TypeError::UnsortedAlternatives);
            }
        }
        Ok(())
    }
}

/// One sampled response for the test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_token_logprobs: Option<Vec<TokenScore>>,
}

impl Candidate {
    pub fn new(index: usize, response: impl Into<String>) -> Result<Self, TypeError> {
        let c = Self {
            index,
            response: response.into(),
            gen_token_logprobs: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.response.is_empty() {
            return Err(TypeError::EmptyField("response"));
        }
        if let Some(toks) = &self.gen_token_logprobs {
            toks.iter().try_for_each(TokenScore::validate)?;
        }
        Ok(())
    }
}

/// Backward terms for a single few-shot example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleBackward {
    pub example_index: usize,
    pub conditioned_logprob: f64,
    pub unconditioned_logprob: f64,
    /// Token-level conditioned scores of the example's answer, kept for
    /// attribution reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned_tokens: Option<Vec<TokenScore>>,
}

/// All score terms for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub forward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_full: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_approx: Option<f64>,
    pub final_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_example_backward: Option<Vec<ExampleBackward>>,
    /// Per-token forward logprobs of the candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_tokens: Option<Vec<TokenScore>>,
}

impl ScoreBreakdown {
    /// The backward value that entered the final score, if any.
    pub fn backward(&self) -> Option<f64> {
        self.backward_full.or(self.backward_approx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_index: usize,
    pub candidates: Vec<Candidate>,
    /// Empty for selectors that do not score (random, majority vote, USC).
    pub breakdowns: Vec<ScoreBreakdown>,
    /// Per-candidate scores of a scoring baseline (CoT-WP); `None` marks an
    /// excluded candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_scores: Option<Vec<Option<f64>>>,
    pub tie_broken: bool,
    pub metadata: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_rejects_blank_fields() {
        assert!(Example::new("  ", "a").is_err());
        assert!(Example::new("q", "\n").is_err());
        assert!(Example::new("q", "a").is_ok());
    }

    #[test]
    fn few_shot_must_be_non_empty() {
        assert_eq!(FewShotSet::new(vec![]), Err(TypeError::EmptyFewShot));
        let set: Result<FewShotSet, _> = serde_json::from_str("[]");
        assert!(set.is_err());
    }

    #[test]
    fn token_score_validation() {
        assert!(TokenScore::new("x", 0.1).validate().is_err());
        assert!(TokenScore::new("x", 0.0).validate().is_ok());
        let mut t = TokenScore::new("x", -1.0);
        // scored token may sit off the top alternative
        t.top_alternatives = Some(vec![("y".into(), -0.2), ("x".into(), -1.0)]);
        assert!(t.validate().is_ok());
        t.top_alternatives = Some(vec![("x".into(), -1.0), ("y".into(), -0.2)]);
        assert_eq!(t.validate(), Err(TypeError::UnsortedAlternatives));
    }

    #[test]
    fn candidate_validation() {
        assert!(Candidate::new(0, "").is_err());
        let mut c = Candidate::new(0, "r").unwrap();
        c.gen_token_logprobs = Some(vec![TokenScore::new("r", 0.5)]);
        assert!(c.validate().is_err());
    }
}
