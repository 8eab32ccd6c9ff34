//! Context assembly for forward, leave-one-out backward, and unconditioned
//! scoring. Templates are applied byte-literally; no whitespace is touched.

use serde::{Deserialize, Serialize};

use crate::error::PromptError;
use crate::types::{Example, FewShotSet};

const QUERY: &str = "{query}";
const ANSWER: &str = "{answer}";

/// How demonstrations and the open query slot are laid out.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemonstrationTemplate {
    #[serde(default)]
    pub header: String,
    pub example_block: String,
    pub query_block: String,
    pub separator: String,
}

impl Default for DemonstrationTemplate {
    fn default() -> Self {
        Self {
            header: String::new(),
            example_block: "Q: {query}\nA: {answer}".into(),
            query_block: "Q: {query}\nA: ".into(),
            separator: "\n\n".into(),
        }
    }
}

impl DemonstrationTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        let q = self.example_block.matches(QUERY).count();
        let a = self.example_block.matches(ANSWER).count();
        let ordered = matches!(
            (self.example_block.find(QUERY), self.example_block.find(ANSWER)),
            (Some(qi), Some(ai)) if qi < ai
        );
        if q != 1 || a != 1 || !ordered {
            return Err(PromptError::BadExampleBlock);
        }
        if self.query_block.matches(QUERY).count() != 1 || self.query_block.contains(ANSWER) {
            return Err(PromptError::BadQueryBlock);
        }
        Ok(())
    }

    /// Same template with the header dropped.
    pub fn without_header(&self) -> Self {
        Self {
            header: String::new(),
            ..self.clone()
        }
    }

    fn example_parts(&self) -> (&str, &str, &str) {
        let (pre, rest) = self.example_block.split_once(QUERY).expect("validated");
        let (mid, post) = rest.split_once(ANSWER).expect("validated");
        (pre, mid, post)
    }

    fn query_parts(&self) -> (&str, &str) {
        self.query_block.split_once(QUERY).expect("validated")
    }

    fn render_example(&self, ex: &Example) -> String {
        let (pre, mid, post) = self.example_parts();
        [pre, &ex.query, mid, &ex.answer, post].concat()
    }

    fn render_query(&self, query: &str) -> String {
        let (pre, post) = self.query_parts();
        [pre, query, post].concat()
    }

    fn with_header(&self, body: String) -> String {
        if self.header.is_empty() {
            body
        } else {
            [self.header.as_str(), &self.separator, &body].concat()
        }
    }
}

/// A string the estimator conditions on, and the span whose token logprobs
/// are summed. The estimator sees exactly `context + continuation`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoringContext {
    pub context: String,
    pub continuation: String,
}

impl ScoringContext {
    pub fn new(context: String, continuation: String) -> Result<Self, PromptError> {
        if continuation.is_empty() {
            return Err(PromptError::EmptyContinuation);
        }
        Ok(Self { context, continuation })
    }
}

pub fn render_demonstrations(examples: &FewShotSet, tpl: &DemonstrationTemplate) -> Result<String, PromptError> {
    tpl.validate()?;
    let body = examples
        .iter()
        .map(|ex| tpl.render_example(ex))
        .collect::<Vec<_>>()
        .join(&tpl.separator);
    Ok(tpl.with_header(body))
}

/// Replaces position `i` with `test_pair`, keeping every other example in place.
pub fn leave_one_out_replace(examples: &FewShotSet, i: usize, test_pair: &Example) -> Result<FewShotSet, PromptError> {
    if i >= examples.len() {
        return Err(PromptError::IndexOutOfRange {
            index: i,
            len: examples.len(),
        });
    }
    let mut out = examples.examples().to_vec();
    out[i] = test_pair.clone();
    // every element was already validated except test_pair, which Example enforces
    Ok(FewShotSet::new(out).expect("non-empty"))
}

/// The prompt candidates are sampled from: demonstrations, then the open
/// query slot.
pub fn build_generation_context(
    examples: &FewShotSet,
    test_query: &str,
    tpl: &DemonstrationTemplate,
) -> Result<String, PromptError> {
    let demos = render_demonstrations(examples, tpl)?;
    Ok([demos.as_str(), &tpl.separator, &tpl.render_query(test_query)].concat())
}

pub fn build_forward_context(
    examples: &FewShotSet,
    test_query: &str,
    candidate: &str,
    tpl: &DemonstrationTemplate,
) -> Result<ScoringContext, PromptError> {
    let context = build_generation_context(examples, test_query, tpl)?;
    ScoringContext::new(context, candidate.to_string())
}

/// Returns `(conditioned, unconditioned)` contexts for example `i`. Both score
/// the same continuation `a_i`.
pub fn build_backward_contexts(
    examples: &FewShotSet,
    i: usize,
    test_pair: &Example,
    tpl: &DemonstrationTemplate,
) -> Result<(ScoringContext, ScoringContext), PromptError> {
    let replaced = leave_one_out_replace(examples, i, test_pair)?;
    let target = &examples.examples()[i];
    let demos = render_demonstrations(&replaced, tpl)?;
    let open = tpl.render_query(&target.query);
    let conditioned = ScoringContext::new([demos.as_str(), &tpl.separator, &open].concat(), target.answer.clone())?;
    let unconditioned = ScoringContext::new(tpl.with_header(open), target.answer.clone())?;
    Ok((conditioned, unconditioned))
}

/// A context string read back into its demonstrations and open query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedContext {
    pub demonstrations: Vec<(String, String)>,
    pub open_query: String,
}

/// Inverse of the builders above, used by simulated backends. Splits on the
/// separator, so it is ambiguous when a field itself contains the separator.
pub fn parse_context(context: &str, tpl: &DemonstrationTemplate) -> Option<ParsedContext> {
    tpl.validate().ok()?;
    let mut body = context;
    if !tpl.header.is_empty() {
        if let Some(rest) = body
            .strip_prefix(tpl.header.as_str())
            .and_then(|r| r.strip_prefix(tpl.separator.as_str()))
        {
            body = rest;
        }
    }
    let pieces: Vec<&str> = if tpl.separator.is_empty() {
        vec![body]
    } else {
        body.split(tpl.separator.as_str()).collect()
    };
    let (last, demos) = pieces.split_last()?;
    let (qpre, qpost) = tpl.query_parts();
    let open_query = last.strip_prefix(qpre)?.strip_suffix(qpost)?.to_string();
    let (pre, mid, post) = tpl.example_parts();
    let demonstrations = demos
        .iter()
        .map(|p| {
            let inner = p.strip_prefix(pre)?.strip_suffix(post)?;
            let (q, a) = inner.split_once(mid)?;
            Some((q.to_string(), a.to_string()))
        })
        .collect::<Option<Vec<_>>>()?;
    Some(ParsedContext {
        demonstrations,
        open_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(q: &str, a: &str) -> Example {
        Example::new(q, a).unwrap()
    }

    fn set(n: usize) -> FewShotSet {
        FewShotSet::new((0..n).map(|i| ex(&format!("Q{i}"), &format!("A{i}"))).collect()).unwrap()
    }

    #[test]
    fn renders_single_and_ordered_blocks() {
        let tpl = DemonstrationTemplate::default();
        let one = FewShotSet::new(vec![ex("Q1", "A1")]).unwrap();
        assert_eq!(render_demonstrations(&one, &tpl).unwrap(), "Q: Q1\nA: A1");
        let two = FewShotSet::new(vec![ex("Q1", "A1"), ex("Q2", "A2")]).unwrap();
        let out = render_demonstrations(&two, &tpl).unwrap();
        assert_eq!(out, "Q: Q1\nA: A1\n\nQ: Q2\nA: A2");
        assert_eq!(out, render_demonstrations(&two, &tpl).unwrap());
    }

    #[test]
    fn header_is_prepended() {
        let tpl = DemonstrationTemplate {
            header: "Solve.".into(),
            ..Default::default()
        };
        let one = FewShotSet::new(vec![ex("Q1", "A1")]).unwrap();
        assert_eq!(render_demonstrations(&one, &tpl).unwrap(), "Solve.\n\nQ: Q1\nA: A1");
    }

    #[test]
    fn placeholder_literals_in_fields_are_not_expanded() {
        let tpl = DemonstrationTemplate::default();
        let one = FewShotSet::new(vec![ex("what is {answer}?", "{query}")]).unwrap();
        assert_eq!(
            render_demonstrations(&one, &tpl).unwrap(),
            "Q: what is {answer}?\nA: {query}"
        );
    }

    #[test]
    fn template_validation() {
        let bad = |e: &str, q: &str| DemonstrationTemplate {
            header: String::new(),
            example_block: e.into(),
            query_block: q.into(),
            separator: "\n".into(),
        };
        assert_eq!(
            bad("{answer} {query}", "{query}").validate(),
            Err(PromptError::BadExampleBlock)
        );
        assert_eq!(bad("{query}", "{query}").validate(), Err(PromptError::BadExampleBlock));
        assert_eq!(
            bad("{query}{query}{answer}", "{query}").validate(),
            Err(PromptError::BadExampleBlock)
        );
        assert_eq!(
            bad("{query}{answer}", "{query}{answer}").validate(),
            Err(PromptError::BadQueryBlock)
        );
        assert_eq!(
            bad("{query}{answer}", "none").validate(),
            Err(PromptError::BadQueryBlock)
        );
        assert!(render_demonstrations(&set(1), &bad("{query}", "{query}")).is_err());
    }

    #[test]
    fn leave_one_out_positions() {
        let x = set(3);
        let t = ex("Qt", "R");
        let r0 = leave_one_out_replace(&x, 0, &t).unwrap();
        assert_eq!(
            r0.examples(),
            &[t.clone(), x.examples()[1].clone(), x.examples()[2].clone()]
        );
        let r2 = leave_one_out_replace(&x, 2, &t).unwrap();
        assert_eq!(
            r2.examples(),
            &[x.examples()[0].clone(), x.examples()[1].clone(), t.clone()]
        );
        assert_eq!(
            leave_one_out_replace(&x, 3, &t),
            Err(PromptError::IndexOutOfRange { index: 3, len: 3 })
        );
    }

    #[test]
    fn forward_context_concatenation() {
        let tpl = DemonstrationTemplate::default();
        let one = FewShotSet::new(vec![ex("Q1", "A1")]).unwrap();
        let c = build_forward_context(&one, "Qt", "42", &tpl).unwrap();
        assert_eq!(c.context, "Q: Q1\nA: A1\n\nQ: Qt\nA: ");
        assert_eq!(c.continuation, "42");
        let d = build_forward_context(&one, "Qt", "43", &tpl).unwrap();
        assert_eq!(c.context, d.context);
        assert!(build_forward_context(&one, "Qt", "", &tpl).is_err());
    }

    #[test]
    fn backward_contexts_structure() {
        let tpl = DemonstrationTemplate::default();
        let x = FewShotSet::new(vec![ex("Q0", "ans-zero"), ex("Q1", "ans-one")]).unwrap();
        let t = ex("Qt", "CANDIDATE");
        let (cond, uncond) = build_backward_contexts(&x, 0, &t, &tpl).unwrap();
        assert_eq!(cond.continuation, "ans-zero");
        assert_eq!(uncond.continuation, "ans-zero");
        assert_eq!(cond.context, "Q: Qt\nA: CANDIDATE\n\nQ: Q1\nA: ans-one\n\nQ: Q0\nA: ");
        assert_eq!(uncond.context, "Q: Q0\nA: ");
        assert!(cond.context.contains("CANDIDATE"));
        assert!(!cond.context.contains("ans-zero"));
        assert!(build_backward_contexts(&x, 2, &t, &tpl).is_err());
    }

    #[test]
    fn backward_unconditioned_keeps_header() {
        let tpl = DemonstrationTemplate {
            header: "H".into(),
            ..Default::default()
        };
        let x = FewShotSet::new(vec![ex("Q0", "a0")]).unwrap();
        let (_, u) = build_backward_contexts(&x, 0, &ex("Qt", "r"), &tpl).unwrap();
        assert_eq!(u.context, "H\n\nQ: Q0\nA: ");
        let (_, u) = build_backward_contexts(&x, 0, &ex("Qt", "r"), &tpl.without_header()).unwrap();
        assert_eq!(u.context, "Q: Q0\nA: ");
    }

    #[test]
    fn parse_inverts_builders() {
        let tpl = DemonstrationTemplate {
            header: "Head".into(),
            ..Default::default()
        };
        let x = set(3);
        let (cond, uncond) = build_backward_contexts(&x, 1, &ex("Qt", "R"), &tpl).unwrap();
        let p = parse_context(&cond.context, &tpl).unwrap();
        assert_eq!(p.open_query, "Q1");
        assert_eq!(
            p.demonstrations,
            vec![
                ("Q0".into(), "A0".into()),
                ("Qt".into(), "R".into()),
                ("Q2".into(), "A2".into())
            ]
        );
        let p = parse_context(&uncond.context, &tpl).unwrap();
        assert!(p.demonstrations.is_empty());
        assert_eq!(p.open_query, "Q1");
        assert!(parse_context("garbage", &tpl).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn generation_context_round_trips(n in 1usize..8, q in "[a-z]{1,10}( [a-z]{1,10}){0,3}") {
                let tpl = DemonstrationTemplate::default();
                let ctx = build_generation_context(&set(n), &q, &tpl).unwrap();
                let parsed = parse_context(&ctx, &tpl).unwrap();
                prop_assert_eq!(parsed.open_query, q);
                prop_assert_eq!(parsed.demonstrations.len(), n);
            }

            #[test]
            fn backward_pair_shares_continuation(n in 1usize..8, i in 0usize..8) {
                let s = set(n);
                let pair = ex("test", "candidate");
                let r = build_backward_contexts(&s, i, &pair, &DemonstrationTemplate::default());
                if i >= n {
                    prop_assert!(r.is_err());
                } else {
                    let (c, u) = r.unwrap();
                    prop_assert_eq!(&c.continuation, &s.examples()[i].answer);
                    prop_assert_eq!(&u.continuation, &c.continuation);
                    prop_assert!(c.context.len() > u.context.len());
                }
            }
        }
    }
}
