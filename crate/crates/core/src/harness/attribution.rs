//! Token-level view of the backward score: for each few-shot answer token,
//! the mean conditioned logprob over correct candidates minus the mean over
//! incorrect ones. Tokens where the correct group scores lower are red, the
//! rest blue; only the top 60% by absolute difference are highlighted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::{QueryRow, SelectionRow};
use super::HarnessError;
use crate::types::FewShotSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Highlight {
    Red,
    Blue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedToken {
    pub token: String,
    pub diff: f64,
    pub highlight: Option<Highlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleAttribution {
    pub example_index: usize,
    pub tokens: Vec<AttributedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub query_id: String,
    pub selector: String,
    pub correct_group: usize,
    pub incorrect_group: usize,
    pub examples: Vec<ExampleAttribution>,
}

/// Number of highlighted tokens out of `t`: ceil(0.6 t).
pub fn mask_size(t: usize) -> usize {
    (3 * t).div_ceil(5)
}

/// Marks the `mask_size` tokens with the largest absolute difference; ties
/// go to the earlier position.
pub fn highlight_mask(diffs: &[f64]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[b].abs().total_cmp(&diffs[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; diffs.len()];
    for &i in order.iter().take(mask_size(diffs.len())) {
        mask[i] = true;
    }
    mask
}

fn has_token_terms(s: &SelectionRow, n_cands: usize) -> bool {
    s.breakdowns.as_ref().is_some_and(|bs| {
        bs.len() == n_cands
            && bs.iter().all(|b| {
                b.per_example_backward
                    .as_ref()
                    .is_some_and(|t| !t.is_empty() && t.iter().all(|e| e.conditioned_tokens.is_some()))
            })
    })
}

/// Builds the attribution for one report row from the first selection that
/// retained per-token backward terms for every example (full backward).
pub fn token_attribution(row: &QueryRow) -> Result<TokenAttribution, HarnessError> {
    let undefined = |m: &str| HarnessError::Attribution(format!("attribution undefined: {m}"));
    let correct = row
        .correct_candidates
        .as_ref()
        .ok_or_else(|| undefined("no gold answer"))?;
    let n_correct = correct.iter().filter(|&&c| c).count();
    if n_correct == 0 || n_correct == correct.len() {
        return Err(undefined("candidates do not split into correct and incorrect groups"));
    }
    let n = row.candidates.len();
    let sel = row
        .selections
        .iter()
        .filter(|s| has_token_terms(s, n))
        .max_by_key(|s| {
            let terms = s.breakdowns.as_ref().expect("checked")[0]
                .per_example_backward
                .as_ref()
                .map_or(0, |t| t.len());
            (terms, std::cmp::Reverse(s.selector.clone()))
        })
        .ok_or_else(|| {
            undefined("no selection retained per-token backward terms (run full backward with retain_tokens)")
        })?;
    let bs = sel.breakdowns.as_ref().expect("checked");
    let terms0 = bs[0].per_example_backward.as_ref().expect("checked");

    let mut examples = Vec::with_capacity(terms0.len());
    for (j, ex0) in terms0.iter().enumerate() {
        let toks0 = ex0.conditioned_tokens.as_ref().expect("checked");
        let mut sums = [vec![0.0; toks0.len()], vec![0.0; toks0.len()]];
        for (k, b) in bs.iter().enumerate() {
            let ex = &b.per_example_backward.as_ref().expect("checked")[j];
            let toks = ex.conditioned_tokens.as_ref().expect("checked");
            if ex.example_index != ex0.example_index
                || toks.len() != toks0.len()
                || toks.iter().zip(toks0).any(|(a, b)| a.token != b.token)
            {
                return Err(undefined("candidates disagree on example tokenization"));
            }
            let group = usize::from(!correct[k]);
            for (s, t) in sums[group].iter_mut().zip(toks) {
                *s += t.logprob;
            }
        }
        let n_incorrect = (n - n_correct) as f64;
        let tokens = toks0
            .iter()
            .enumerate()
            .map(|(t, tok)| AttributedToken {
                token: tok.token.clone(),
                diff: sums[0][t] / n_correct as f64 - sums[1][t] / n_incorrect,
                highlight: None,
            })
            .collect();
        examples.push(ExampleAttribution {
            example_index: ex0.example_index,
            tokens,
        });
    }
    let mut attr = TokenAttribution {
        query_id: row.id.clone(),
        selector: sel.selector.clone(),
        correct_group: n_correct,
        incorrect_group: n - n_correct,
        examples,
    };
    attr.apply_mask();
    Ok(attr)
}

impl TokenAttribution {
    pub fn total_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).sum()
    }

    fn apply_mask(&mut self) {
        let diffs: Vec<f64> = self
            .examples
            .iter()
            .flat_map(|e| e.tokens.iter().map(|t| t.diff))
            .collect();
        let mut mask = highlight_mask(&diffs).into_iter();
        for t in self.examples.iter_mut().flat_map(|e| e.tokens.iter_mut()) {
            let on = mask.next().expect("one flag per token");
            t.highlight = on.then_some(if t.diff < 0.0 { Highlight::Red } else { Highlight::Blue });
        }
    }

    pub fn highlighted(&self) -> usize {
        self.tokens().filter(|t| t.highlight.is_some()).count()
    }

    /// Share of all tokens highlighted red.
    pub fn red_ratio(&self) -> f64 {
        let red = self.tokens().filter(|t| t.highlight == Some(Highlight::Red)).count();
        red as f64 / self.total_tokens().max(1) as f64
    }

    fn tokens(&self) -> impl Iterator<Item = &AttributedToken> {
        self.examples.iter().flat_map(|e| e.tokens.iter())
    }

    /// Plain text: `[tok]` marks red, `{tok}` marks blue.
    pub fn render_text(&self, few_shot: Option<&FewShotSet>) -> String {
        let mut s = format!(
            "query {} ({} correct / {} incorrect, selector {}), red ratio {:.2}\n",
            self.query_id,
            self.correct_group,
            self.incorrect_group,
            self.selector,
            self.red_ratio()
        );
        for ex in &self.examples {
            let _ = write!(s, "\n[{}]", ex.example_index);
            if let Some(q) = few_shot.and_then(|f| f.get(ex.example_index)) {
                let _ = write!(s, " {}", q.query);
            }
            s.push('\n');
            for t in &ex.tokens {
                match t.highlight {
                    Some(Highlight::Red) => {
                        let _ = write!(s, "[{}]", t.token);
                    }
                    Some(Highlight::Blue) => {
                        let _ = write!(s, "{{{}}}", t.token);
                    }
                    None => s.push_str(&t.token),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn render_html(&self, few_shot: Option<&FewShotSet>) -> String {
        let mut s = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Backward attribution</title>\n<style>\
body{font-family:sans-serif;max-width:60em;margin:2em auto}\
.red{background:#f6b3b3}.blue{background:#b3c8f6}\
.ex{white-space:pre-wrap;font-family:monospace;border:1px solid #ddd;padding:.5em;margin:.5em 0}\
</style></head><body>\n",
        );
        let _ = writeln!(
            s,
            "<h1>Query {}</h1>\n<p>{} correct, {} incorrect candidates; selector {}; red ratio ({:.2})</p>",
            escape(&self.query_id),
            self.correct_group,
            self.incorrect_group,
            escape(&self.selector),
            self.red_ratio()
        );
        for ex in &self.examples {
            let _ = write!(s, "<h2>Example {}</h2>", ex.example_index);
            if let Some(q) = few_shot.and_then(|f| f.get(ex.example_index)) {
                let _ = write!(s, "<p>{}</p>", escape(&q.query));
            }
            s.push_str("<div class=\"ex\">");
            for t in &ex.tokens {
                let tok = escape(&t.token);
                match t.highlight {
                    Some(h) => {
                        let class = if h == Highlight::Red { "red" } else { "blue" };
                        let _ = write!(s, "<span class=\"{class}\" title=\"{:.4}\">{tok}</span>", t.diff);
                    }
                    None => s.push_str(&tok),
                }
            }
            s.push_str("</div>\n");
        }
        s.push_str("</body></html>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ExampleBackward, ScoreBreakdown, TokenScore};

    fn breakdown(per_token: &[&[f64]]) -> ScoreBreakdown {
        let terms = per_token
            .iter()
            .enumerate()
            .map(|(i, lps)| ExampleBackward {
                example_index: i,
                conditioned_logprob: lps.iter().sum(),
                unconditioned_logprob: -1.0,
                conditioned_tokens: Some(
                    lps.iter()
                        .enumerate()
                        .map(|(t, &l)| TokenScore::new(format!("t{t} "), l))
                        .collect(),
                ),
            })
            .collect();
        ScoreBreakdown {
            forward: -1.0,
            backward_full: Some(0.0),
            backward_approx: None,
            final_score: -1.0,
            per_example_backward: Some(terms),
            forward_tokens: None,
        }
    }

    fn row(correct: Vec<bool>, bds: Vec<ScoreBreakdown>) -> QueryRow {
        QueryRow {
            id: "q".into(),
            gold: Some("g".into()),
            candidates: vec!["c".into(); correct.len()],
            candidate_hashes: vec![],
            answers: vec![],
            correct_candidates: Some(correct),
            selections: vec![SelectionRow {
                selector: "referi-full".into(),
                selected_index: Some(0),
                correct: None,
                credit: None,
                tie_broken: false,
                scores: None,
                forward: None,
                backward: None,
                relevant_example: None,
                breakdowns: Some(bds),
                error: None,
            }],
            error: None,
        }
    }

    #[test]
    fn mask_sizes() {
        assert_eq!(mask_size(10), 6);
        assert_eq!(mask_size(1), 1);
        assert_eq!(mask_size(5), 3);
        assert_eq!(mask_size(0), 0);
    }

    #[test]
    fn ties_fill_by_position() {
        assert_eq!(highlight_mask(&[0.0; 5]), vec![true, true, true, false, false]);
        assert_eq!(
            highlight_mask(&[0.0, 0.0, -2.0, 1.0, 0.0]),
            vec![true, false, true, true, false]
        );
    }

    #[test]
    fn largest_gap_is_masked_red() {
        let same: &[f64] = &[-1.0, -1.0, -1.0];
        let shifted: &[f64] = &[-1.0, -6.0, -1.0];
        let r = row(
            vec![true, false, true],
            vec![
                breakdown(&[shifted, same]),
                breakdown(&[same, same]),
                breakdown(&[shifted, same]),
            ],
        );
        let a = token_attribution(&r).unwrap();
        assert_eq!(a.total_tokens(), 6);
        assert_eq!(a.highlighted(), 4);
        let t = &a.examples[0].tokens[1];
        assert_eq!(t.diff, -5.0);
        assert_eq!(t.highlight, Some(Highlight::Red));
        assert_eq!(a.examples[0].tokens[0].highlight, Some(Highlight::Blue));
        assert!((a.red_ratio() - 1.0 / 6.0).abs() < 1e-15);
        let html = a.render_html(None);
        assert!(html.contains("class=\"red\" title=\"-5.0000\">t1 </span>"));
        assert!(a.render_text(None).contains("{t0 }[t1 ]{t2 }\n"));
    }

    #[test]
    fn single_group_is_undefined() {
        let same: &[f64] = &[-1.0];
        let r = row(vec![true, true], vec![breakdown(&[same]), breakdown(&[same])]);
        let err = token_attribution(&r).unwrap_err();
        assert!(err.to_string().contains("attribution undefined"));
    }
}
