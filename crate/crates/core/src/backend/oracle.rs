//! A backend holding an explicit joint probability table over
//! (few-shot answers, test response), so every conditional a score needs is
//! an exact ratio of marginal sums.
//!
//! Variables: `N` few-shot slots, each with a fixed query and an answer drawn
//! from `m` single-character atoms; one response of exactly `L` tokens over
//! `V` single-character atoms for a fixed test query. Contexts are read back
//! with [`parse_context`]: a demonstration whose query is slot `j`'s query
//! fixes that slot's answer, one whose query is the test query fixes the
//! response, and the open query names the target variable.
//!
//! For `N >= 2`, [`JointOracle::random`] draws from a family in which the
//! answers are coupled to the response only through their sum modulo `m`,
//! with a uniform sum marginal. In that family every `N-1` answers are
//! uniform and independent given the response, which makes the leave-one-out
//! mean backward estimate equal `log P(X|y) - log P(X)` exactly. For a
//! generic joint that equality holds only for `N = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse};
use crate::prompt::{parse_context, DemonstrationTemplate};
use crate::types::{Candidate, Example, FewShotSet, TokenScore};

const ANSWER_ATOMS: [char; 6] = ['x', 'y', 'z', 'u', 'v', 'w'];
const RESPONSE_ATOMS: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];
pub const MAX_VOCAB: usize = 6;
pub const MAX_RESPONSE_LEN: usize = 5;
pub const MAX_JOINT_SIZE: usize = 100_000;
pub const TOKENIZER_ID: &str = "oracle-atoms";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleShape {
    pub slots: usize,
    pub answer_arity: usize,
    pub vocab: usize,
    pub response_len: usize,
}

impl OracleShape {
    pub fn answer_space(&self) -> usize {
        self.answer_arity.pow(self.slots as u32)
    }

    pub fn response_space(&self) -> usize {
        self.vocab.pow(self.response_len as u32)
    }

    pub fn joint_size(&self) -> usize {
        self.answer_space() * self.response_space()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let ok = self.slots >= 1
            && (2..=MAX_VOCAB).contains(&self.answer_arity)
            && (1..=MAX_VOCAB).contains(&self.vocab)
            && (1..=MAX_RESPONSE_LEN).contains(&self.response_len)
            && self
                .answer_arity
                .checked_pow(self.slots as u32)
                .and_then(|a| a.checked_mul(self.response_space()))
                .is_some_and(|n| n <= MAX_JOINT_SIZE);
        if ok {
            Ok(())
        } else {
            Err(BackendError::InvalidRequest(format!(
                "oracle shape out of bounds: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointOracle {
    shape: OracleShape,
    template: DemonstrationTemplate,
    slot_queries: Vec<String>,
    test_query: String,
    /// Row-major over (answers as base-m digits, slot 0 least significant;
    /// response as big-endian base-V digits).
    table: Vec<f64>,
    realized: Vec<usize>,
    model_id: String,
}

enum Target {
    Slot(usize),
    Response,
}

struct Evidence {
    answers: Vec<Option<usize>>,
    response: Option<Vec<usize>>,
}

impl JointOracle {
    /// Wraps an explicit table. Entries must be positive and sum to 1 within 1e-12.
    pub fn from_table(shape: OracleShape, table: Vec<f64>, realized: Vec<usize>) -> Result<Self, BackendError> {
        shape.validate()?;
        if table.len() != shape.joint_size() {
            return Err(BackendError::InvalidRequest("table size does not match shape".into()));
        }
        if table.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(BackendError::InvalidRequest("table entries must be positive".into()));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BackendError::InvalidRequest(format!("table sums to {total}")));
        }
        if realized.len() != shape.slots || realized.iter().any(|&a| a >= shape.answer_arity) {
            return Err(BackendError::InvalidRequest(
                "realized answers do not match shape".into(),
            ));
        }
        let mut h = Sha256::new();
        for p in &table {
            h.update(p.to_le_bytes());
        }
        let model_id = format!(
            "joint-{}x{}-{}^{}-{}",
            shape.slots,
            shape.answer_arity,
            shape.vocab,
            shape.response_len,
            &hex::encode(h.finalize())[..12]
        );
        Ok(Self {
            shape,
            template: DemonstrationTemplate::default(),
            slot_queries: (0..shape.slots).map(|i| format!("slot {i}")).collect(),
            test_query: "test".into(),
            table,
            realized,
            model_id,
        })
    }

    /// Random instance; `N = 1` is an unstructured joint, `N >= 2` uses the
    /// sum-coupled family described in the module docs. The realized
    /// few-shot answers are drawn from the answer marginal.
    pub fn random(shape: OracleShape, rng: &mut impl Rng) -> Result<Self, BackendError> {
        shape.validate()?;
        let normal = Normal::<f64>::new(0.0, 1.0).expect("valid");
        let (na, nr, m) = (shape.answer_space(), shape.response_space(), shape.answer_arity);
        let mut table = vec![0.0; na * nr];
        if shape.slots == 1 {
            for p in table.iter_mut() {
                *p = (1.5 * normal.sample(rng)).exp();
            }
        } else {
            // coupling[r][s], each column s normalized to mass 1/m
            let mut coupling = vec![vec![0.0; m]; nr];
            for row in coupling.iter_mut() {
                for w in row.iter_mut() {
                    *w = (1.5 * normal.sample(rng)).exp();
                }
            }
            for s in 0..m {
                let col: f64 = coupling.iter().map(|row| row[s]).sum();
                for row in coupling.iter_mut() {
                    row[s] /= col * m as f64;
                }
            }
            let scale = (m as f64).powi(-(shape.slots as i32 - 1));
            for a in 0..na {
                let s = digits(a, m, shape.slots).iter().sum::<usize>() % m;
                for r in 0..nr {
                    table[a * nr + r] = scale * coupling[r][s];
                }
            }
        }
        let total: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= total);

        let marginal: Vec<f64> = (0..na).map(|a| table[a * nr..(a + 1) * nr].iter().sum()).collect();
        let a = sample_index(&marginal, rng.random::<f64>());
        let realized = digits(a, m, shape.slots);
        Self::from_table(shape, table, realized)
    }

    pub fn with_realized(mut self, realized: Vec<usize>) -> Result<Self, BackendError> {
        if realized.len() != self.shape.slots || realized.iter().any(|&a| a >= self.shape.answer_arity) {
            return Err(BackendError::InvalidRequest(
                "realized answers do not match shape".into(),
            ));
        }
        self.realized = realized;
        Ok(self)
    }

    pub fn shape(&self) -> OracleShape {
        self.shape
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn template(&self) -> &DemonstrationTemplate {
        &self.template
    }

    pub fn test_query(&self) -> &str {
        &self.test_query
    }

    pub fn realized_answers(&self) -> &[usize] {
        &self.realized
    }

    /// Table index of a full assignment.
    pub fn cell(&self, answers: &[usize], response: &[usize]) -> usize {
        let m = self.shape.answer_arity;
        let a = answers.iter().rev().fold(0, |acc, &d| acc * m + d);
        a * self.shape.response_space() + self.response_index(response)
    }

    fn response_index(&self, response: &[usize]) -> usize {
        response.iter().fold(0, |acc, &d| acc * self.shape.vocab + d)
    }

    pub fn answer_text(&self, a: usize) -> String {
        ANSWER_ATOMS[a].to_string()
    }

    pub fn response_text(&self, response: &[usize]) -> String {
        response.iter().map(|&d| RESPONSE_ATOMS[d]).collect()
    }

    pub fn decode_response(&self, text: &str) -> Option<Vec<usize>> {
        let out: Option<Vec<usize>> = text
            .chars()
            .map(|c| RESPONSE_ATOMS[..self.shape.vocab].iter().position(|&a| a == c))
            .collect();
        out.filter(|v| v.len() == self.shape.response_len)
    }

    fn decode_answer(&self, text: &str) -> Option<usize> {
        let mut chars = text.chars();
        let c = chars.next()?;
        if chars.next().is_some() {
            return None;
        }
        ANSWER_ATOMS[..self.shape.answer_arity].iter().position(|&a| a == c)
    }

    pub fn realized_few_shot(&self) -> FewShotSet {
        let examples = self
            .slot_queries
            .iter()
            .zip(&self.realized)
            .map(|(q, &a)| Example::new(q.clone(), self.answer_text(a)).expect("non-empty"))
            .collect();
        FewShotSet::new(examples).expect("N >= 1")
    }

    /// Total mass of cells whose answers agree with `answers` (where set) and
    /// whose response starts with `prefix`.
    fn mass(&self, answers: &[Option<usize>], prefix: &[usize]) -> f64 {
        let (m, nr, v) = (self.shape.answer_arity, self.shape.response_space(), self.shape.vocab);
        let block = v.pow((self.shape.response_len - prefix.len()) as u32);
        let start = self.response_index(prefix) * block;
        let mut total = 0.0;
        for a in 0..self.shape.answer_space() {
            let mut rest = a;
            let mut ok = true;
            for want in answers {
                let d = rest % m;
                rest /= m;
                if want.is_some_and(|w| w != d) {
                    ok = false;
                    break;
                }
            }
            if ok {
                total += self.table[a * nr + start..a * nr + start + block].iter().sum::<f64>();
            }
        }
        total
    }

    fn read_context(&self, context: &str) -> Result<(Evidence, Target), BackendError> {
        let bad = |m: &str| BackendError::InvalidRequest(format!("oracle cannot read context: {m}"));
        let parsed = parse_context(context, &self.template).ok_or_else(|| bad("template mismatch"))?;
        let mut ev = Evidence {
            answers: vec![None; self.shape.slots],
            response: None,
        };
        for (q, a) in &parsed.demonstrations {
            if q == &self.test_query {
                ev.response = Some(self.decode_response(a).ok_or_else(|| bad("bad response text"))?);
            } else if let Some(j) = self.slot_queries.iter().position(|s| s == q) {
                ev.answers[j] = Some(self.decode_answer(a).ok_or_else(|| bad("bad answer text"))?);
            } else {
                return Err(bad("unknown demonstration query"));
            }
        }
        let target = if parsed.open_query == self.test_query {
            if ev.response.is_some() {
                return Err(bad("response is both observed and open"));
            }
            Target::Response
        } else if let Some(j) = self.slot_queries.iter().position(|s| *s == parsed.open_query) {
            if ev.answers[j].is_some() {
                return Err(bad("slot is both observed and open"));
            }
            Target::Slot(j)
        } else {
            return Err(bad("unknown open query"));
        };
        Ok((ev, target))
    }

    /// Per-token conditionals of the response given the answer evidence.
    fn response_conditionals(&self, answers: &[Option<usize>], prefix: &[usize]) -> Vec<f64> {
        let denom = self.mass(answers, prefix);
        let mut next = prefix.to_vec();
        next.push(0);
        (0..self.shape.vocab)
            .map(|v| {
                *next.last_mut().expect("pushed") = v;
                self.mass(answers, &next) / denom
            })
            .collect()
    }

    fn top_k(&self, probs: &[(String, f64)], k: usize) -> Option<Vec<(String, f64)>> {
        if k == 0 {
            return None;
        }
        let mut alts: Vec<(String, f64)> = probs.iter().map(|(t, p)| (t.clone(), p.ln())).collect();
        alts.sort_by(|x, y| y.1.total_cmp(&x.1));
        alts.truncate(k);
        Some(alts)
    }
}

impl Backend for JointOracle {
    fn info(&self) -> BackendInfo {
        BackendInfo::new("oracle", self.model_id.clone())
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        req.validate()?;
        let (ev, target) = self.read_context(&req.context)?;
        let token_scores = match target {
            Target::Response => {
                let r = self
                    .decode_response(&req.continuation)
                    .ok_or_else(|| BackendError::InvalidRequest("continuation is not a response".into()))?;
                (0..r.len())
                    .map(|t| {
                        let probs = self.response_conditionals(&ev.answers, &r[..t]);
                        let named: Vec<(String, f64)> = probs
                            .iter()
                            .enumerate()
                            .map(|(v, &p)| (RESPONSE_ATOMS[v].to_string(), p))
                            .collect();
                        let num = self.mass(&ev.answers, &r[..=t]);
                        let den = self.mass(&ev.answers, &r[..t]);
                        TokenScore {
                            token: RESPONSE_ATOMS[r[t]].to_string(),
                            logprob: num.ln() - den.ln(),
                            top_alternatives: self.top_k(&named, req.top_k_alternatives),
                        }
                    })
                    .collect()
            }
            Target::Slot(j) => {
                let a = self
                    .decode_answer(&req.continuation)
                    .ok_or_else(|| BackendError::InvalidRequest("continuation is not an answer atom".into()))?;
                let prefix = ev.response.clone().unwrap_or_default();
                let den = self.mass(&ev.answers, &prefix);
                let mut with = ev.answers.clone();
                let named: Vec<(String, f64)> = (0..self.shape.answer_arity)
                    .map(|x| {
                        with[j] = Some(x);
                        (self.answer_text(x), self.mass(&with, &prefix) / den)
                    })
                    .collect();
                with[j] = Some(a);
                let num = self.mass(&with, &prefix);
                vec![TokenScore {
                    token: self.answer_text(a),
                    logprob: num.ln() - den.ln(),
                    top_alternatives: self.top_k(&named, req.top_k_alternatives),
                }]
            }
        };
        Ok(LikelihoodResponse {
            token_scores,
            tokenizer_id: TOKENIZER_ID.into(),
            truncated: false,
        })
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        req.validate()?;
        let (ev, target) = self.read_context(&req.context)?;
        if !matches!(target, Target::Response) {
            return Err(BackendError::InvalidRequest(
                "oracle only generates test responses".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(0));
        (0..req.num_samples)
            .map(|k| {
                let mut r = Vec::with_capacity(self.shape.response_len);
                let mut toks = Vec::with_capacity(self.shape.response_len);
                for _ in 0..self.shape.response_len {
                    let probs = self.response_conditionals(&ev.answers, &r);
                    let v = if req.temperature == 0.0 {
                        argmax(&probs)
                    } else {
                        let w: Vec<f64> = probs.iter().map(|p| p.powf(1.0 / req.temperature)).collect();
                        let z: f64 = w.iter().sum();
                        let w: Vec<f64> = w.iter().map(|x| x / z).collect();
                        sample_index(&w, rng.random::<f64>())
                    };
                    toks.push(TokenScore::new(RESPONSE_ATOMS[v].to_string(), probs[v].ln()));
                    r.push(v);
                }
                let mut c = Candidate::new(k, self.response_text(&r)).expect("non-empty");
                if req.want_logprobs {
                    c.gen_token_logprobs = Some(toks);
                }
                Ok(c)
            })
            .collect()
    }
}

fn digits(mut x: usize, base: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let d = x % base;
            x /= base;
            d
        })
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sample_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
