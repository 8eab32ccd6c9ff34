//! OpenAI-compatible HTTP backend.
//!
//! - generation: `POST {base}/v1/completions` or `POST {base}/v1/chat/completions`
//! - continuation scoring: `POST {base}/v1/completions` with `echo: true`
//! - embeddings: `POST {base}/v1/embeddings`
//!
//! Continuation tokens are located through the echoed `text_offset`s
//! (character offsets). A token straddling the context/continuation boundary
//! keeps only its continuation part, so token texts always concatenate to the
//! requested continuation.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse, RetryPolicy,
};
use crate::types::{Candidate, TokenScore};

pub const ENV_API_KEY: &str = "REFERI_API_KEY";
pub const ENV_BASE_URL: &str = "REFERI_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationApi {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub embedding_model: Option<String>,
    pub generation_api: GenerationApi,
    /// Whether the endpoint can score an arbitrary continuation via echo.
    pub echo_scoring: bool,
    /// Base of the logprobs the endpoint reports; converted to natural log.
    pub logprob_base: f64,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: model.into(),
            embedding_model: None,
            generation_api: GenerationApi::Completions,
            echo_scoring: true,
            logprob_base: std::f64::consts::E,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Base URL from `REFERI_BASE_URL`, falling back to the given default.
    pub fn from_env(default_base: &str, model: impl Into<String>) -> Self {
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| default_base.to_string());
        Self::new(base, model)
    }
}

pub struct OpenAiBackend {
    cfg: OpenAiConfig,
    client: reqwest::blocking::Client,
    log_base: f64,
}

impl OpenAiBackend {
    pub fn new(cfg: OpenAiConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        let log_base = cfg.logprob_base.ln();
        Ok(Self { cfg, client, log_base })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        self.cfg.retry.run(|| {
            let mut rb = self.client.post(&url).json(body);
            if let Some(key) = &self.cfg.api_key {
                rb = rb.bearer_auth(key);
            }
            let resp = rb.send().map_err(|e| BackendError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
            let status = resp.status();
            let text = resp.text().map_err(|e| BackendError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
            if !status.is_success() {
                return Err(BackendError::Status {
                    status: status.as_u16(),
                    body: text,
                    attempts: 0,
                });
            }
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
        })
    }

    fn to_ln(&self, lp: f64) -> f64 {
        (lp * self.log_base).min(0.0)
    }
}

fn protocol(msg: &str) -> BackendError {
    BackendError::Protocol(msg.to_string())
}

fn top_from_map(v: &Value, scale: impl Fn(f64) -> f64) -> Option<Vec<(String, f64)>> {
    let obj = v.as_object()?;
    let mut alts: Vec<(String, f64)> = obj
        .iter()
        .filter_map(|(t, lp)| Some((t.clone(), scale(lp.as_f64()?))))
        .collect();
    alts.sort_by(|a, b| b.1.total_cmp(&a.1));
    Some(alts)
}

fn top_from_list(v: &Value, scale: impl Fn(f64) -> f64) -> Option<Vec<(String, f64)>> {
    let list = v.as_array()?;
    let mut alts: Vec<(String, f64)> = list
        .iter()
        .filter_map(|e| {
            Some((
                e.get("token")?.as_str()?.to_string(),
                scale(e.get("logprob")?.as_f64()?),
            ))
        })
        .collect();
    alts.sort_by(|a, b| b.1.total_cmp(&a.1));
    Some(alts)
}

/// Extracts continuation token scores from an echoed completions `logprobs`
/// object.
pub fn continuation_tokens_from_echo(
    logprobs: &Value,
    context: &str,
    continuation: &str,
    top_k: usize,
    scale: impl Fn(f64) -> f64 + Copy,
) -> Result<Vec<TokenScore>, BackendError> {
    let tokens = logprobs["tokens"]
        .as_array()
        .ok_or_else(|| protocol("missing logprobs.tokens"))?;
    let lps = logprobs["token_logprobs"]
        .as_array()
        .ok_or_else(|| protocol("missing logprobs.token_logprobs"))?;
    let offsets = logprobs["text_offset"]
        .as_array()
        .ok_or_else(|| protocol("missing logprobs.text_offset"))?;
    let tops = logprobs["top_logprobs"].as_array();
    let ctx_len = context.chars().count();
    let prompt_len = ctx_len + continuation.chars().count();
    let mut out = Vec::new();
    for (j, tok) in tokens.iter().enumerate() {
        let tok = tok.as_str().ok_or_else(|| protocol("non-string token"))?;
        let off = offsets
            .get(j)
            .and_then(Value::as_u64)
            .ok_or_else(|| protocol("missing text offset"))? as usize;
        let end = off + tok.chars().count();
        if off >= prompt_len || end <= ctx_len {
            continue;
        }
        let lp = lps
            .get(j)
            .and_then(Value::as_f64)
            .ok_or_else(|| protocol("continuation token without logprob (empty context?)"))?;
        let skip = ctx_len.saturating_sub(off);
        let keep = prompt_len.min(end) - off.max(ctx_len);
        let text: String = tok.chars().skip(skip).take(keep).collect();
        let top_alternatives = if top_k > 0 {
            tops.and_then(|t| t.get(j))
                .and_then(|v| top_from_map(v, scale))
                .map(|mut a| {
                    a.truncate(top_k);
                    a
                })
        } else {
            None
        };
        out.push(TokenScore {
            token: text,
            logprob: scale(lp),
            top_alternatives,
        });
    }
    let rebuilt: String = out.iter().map(|t| t.token.as_str()).collect();
    if rebuilt != continuation {
        return Err(BackendError::Protocol(format!(
            "echoed tokens do not reconstruct the continuation: {rebuilt:?} != {continuation:?}"
        )));
    }
    Ok(out)
}

impl Backend for OpenAiBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo::new(format!("openai:{}", self.cfg.base_url), self.cfg.model.clone())
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        req.validate()?;
        let scale = |lp: f64| self.to_ln(lp);
        let mut body = match self.cfg.generation_api {
            GenerationApi::Completions => json!({
                "model": self.cfg.model,
                "prompt": req.context,
                "max_tokens": req.max_tokens,
                "temperature": req.temperature,
                "n": req.num_samples,
            }),
            GenerationApi::Chat => json!({
                "model": self.cfg.model,
                "messages": [{"role": "user", "content": req.context}],
                "max_tokens": req.max_tokens,
                "temperature": req.temperature,
                "n": req.num_samples,
            }),
        };
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        if req.want_logprobs {
            match self.cfg.generation_api {
                GenerationApi::Completions => body["logprobs"] = json!(1),
                GenerationApi::Chat => body["logprobs"] = json!(true),
            }
        }
        let path = match self.cfg.generation_api {
            GenerationApi::Completions => "/v1/completions",
            GenerationApi::Chat => "/v1/chat/completions",
        };
        let resp = self.post(path, &body)?;
        let mut choices = resp["choices"]
            .as_array()
            .ok_or_else(|| protocol("missing choices"))?
            .clone();
        choices.sort_by_key(|c| c["index"].as_u64().unwrap_or(0));
        if choices.len() != req.num_samples {
            return Err(BackendError::Protocol(format!(
                "asked for {} samples, got {}",
                req.num_samples,
                choices.len()
            )));
        }
        choices
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let (text, toks) = match self.cfg.generation_api {
                    GenerationApi::Completions => {
                        let text = c["text"].as_str().ok_or_else(|| protocol("missing choice text"))?;
                        let toks = c["logprobs"]["tokens"]
                            .as_array()
                            .zip(c["logprobs"]["token_logprobs"].as_array())
                            .map(|(t, l)| {
                                t.iter()
                                    .zip(l)
                                    .filter_map(|(t, l)| Some(TokenScore::new(t.as_str()?, scale(l.as_f64()?))))
                                    .collect::<Vec<_>>()
                            });
                        (text.to_string(), toks)
                    }
                    GenerationApi::Chat => {
                        let text = c["message"]["content"]
                            .as_str()
                            .ok_or_else(|| protocol("missing message content"))?;
                        let toks = c["logprobs"]["content"].as_array().map(|items| {
                            items
                                .iter()
                                .filter_map(|e| {
                                    Some(TokenScore {
                                        token: e["token"].as_str()?.to_string(),
                                        logprob: scale(e["logprob"].as_f64()?),
                                        top_alternatives: top_from_list(&e["top_logprobs"], scale)
                                            .filter(|a| !a.is_empty()),
                                    })
                                })
                                .collect::<Vec<_>>()
                        });
                        (text.to_string(), toks)
                    }
                };
                let mut cand = Candidate::new(k, text).map_err(|e| BackendError::Protocol(e.to_string()))?;
                if req.want_logprobs {
                    cand.gen_token_logprobs = toks.filter(|t| !t.is_empty());
                }
                Ok(cand)
            })
            .collect()
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        req.validate()?;
        if !self.cfg.echo_scoring {
            return Err(BackendError::no_scoring());
        }
        let body = json!({
            "model": self.cfg.model,
            "prompt": format!("{}{}", req.context, req.continuation),
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": req.top_k_alternatives.max(1),
        });
        let resp = self.post("/v1/completions", &body)?;
        let logprobs = &resp["choices"][0]["logprobs"];
        let token_scores = continuation_tokens_from_echo(
            logprobs,
            &req.context,
            &req.continuation,
            req.top_k_alternatives,
            |lp| self.to_ln(lp),
        )?;
        Ok(LikelihoodResponse {
            token_scores,
            tokenizer_id: self.cfg.model.clone(),
            truncated: false,
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let model = self.cfg.embedding_model.as_ref().unwrap_or(&self.cfg.model);
        let resp = self.post("/v1/embeddings", &json!({"model": model, "input": text}))?;
        resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| protocol("missing data[0].embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| protocol("non-numeric embedding")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(x: f64) -> f64 {
        x
    }

    #[test]
    fn echo_extraction_on_token_boundary() {
        let lp = json!({
            "tokens": ["Q", ":", " 1", "\nA", ":", " 4", "2", " ."],
            "token_logprobs": [null, -0.1, -0.2, -0.3, -0.4, -1.5, -0.5, -3.0],
            "text_offset": [0, 1, 2, 4, 6, 7, 9, 10],
            "top_logprobs": [null, {":": -0.1}, {" 1": -0.2}, {"\nA": -0.3}, {":": -0.4},
                             {" 4": -1.5, " 5": -0.9}, {"2": -0.5, "3": -1.2}, {" .": -3.0}]
        });
        // prompt = "Q: 1\nA: 42", context = "Q: 1\nA:", generated token " ." follows
        let toks = continuation_tokens_from_echo(&lp, "Q: 1\nA:", " 42", 2, ident).unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].token, " 4");
        assert_eq!(toks[0].logprob, -1.5);
        assert_eq!(toks[0].top_alternatives.as_ref().unwrap()[0].0, " 5");
        assert_eq!(toks[1].token, "2");
    }

    #[test]
    fn echo_extraction_trims_straddling_token() {
        let lp = json!({
            "tokens": ["A", ": 4", "2"],
            "token_logprobs": [null, -2.0, -0.5],
            "text_offset": [0, 1, 4],
        });
        let toks = continuation_tokens_from_echo(&lp, "A:", " 42", 0, ident).unwrap();
        assert_eq!(toks.iter().map(|t| t.token.as_str()).collect::<String>(), " 42");
        assert_eq!(toks[0].logprob, -2.0);
        assert!(toks[0].top_alternatives.is_none());
    }

    #[test]
    fn echo_extraction_rejects_mismatch() {
        let lp = json!({"tokens": ["A", "x"], "token_logprobs": [null, -1.0], "text_offset": [0, 1]});
        assert!(continuation_tokens_from_echo(&lp, "A", "y", 0, ident).is_err());
        let missing = json!({"tokens": ["A"]});
        assert!(continuation_tokens_from_echo(&missing, "", "A", 0, ident).is_err());
    }

    #[test]
    fn base_conversion() {
        let mut cfg = OpenAiConfig::new("http://localhost:1", "m");
        cfg.logprob_base = 2.0;
        let b = OpenAiBackend::new(cfg).unwrap();
        assert!((b.to_ln(-1.0) - -std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn chat_only_endpoint_declares_no_scoring() {
        let mut cfg = OpenAiConfig::new("http://localhost:1", "m");
        cfg.echo_scoring = false;
        let b = OpenAiBackend::new(cfg).unwrap();
        let err = b.score_continuation(&LikelihoodRequest::new("a", "b")).unwrap_err();
        assert_eq!(err.to_string(), "no echo-scoring support");
        assert!(!err.is_retryable());
    }
}
