//! A small OpenAI-compatible server over `std::net` for tests.
//!
//! It serves `/v1/completions` (sampling and echo scoring) and
//! `/v1/embeddings` from a deterministic toy model whose token logprobs
//! depend on the whole preceding text.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Logged {
    pub path: String,
    pub body: Value,
    pub authorization: Option<String>,
}

#[derive(Default)]
struct State {
    log: Mutex<Vec<Logged>>,
    /// Requests still to be answered with 503 before serving normally.
    fail_next: AtomicUsize,
}

pub struct MockServer {
    pub base_url: String,
    state: Arc<State>,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let state = Arc::new(State::default());
        let st = state.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let st = st.clone();
                thread::spawn(move || serve(stream, &st));
            }
        });
        Self { base_url, state }
    }

    pub fn requests(&self) -> Vec<Logged> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.state.log.lock().unwrap().len()
    }

    pub fn fail_next(&self, n: usize) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }
}

fn serve(stream: TcpStream, st: &State) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone"));
    let mut out = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
        let mut len = 0usize;
        let mut auth = None;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap_or(0),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let failing = st
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        let (status, resp) = if failing {
            ("503 Service Unavailable", json!({"error": "overloaded"}))
        } else {
            st.log.lock().unwrap().push(Logged {
                path: path.clone(),
                body: body.clone(),
                authorization: auth,
            });
            match route(&path, &body) {
                Some(v) => ("200 OK", v),
                None => ("404 Not Found", json!({"error": "no route"})),
            }
        };
        let text = resp.to_string();
        let head = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            text.len()
        );
        if out
            .write_all(head.as_bytes())
            .and_then(|_| out.write_all(text.as_bytes()))
            .is_err()
        {
            return;
        }
    }
}

fn route(path: &str, body: &Value) -> Option<Value> {
    match path {
        "/v1/completions" if body["echo"].as_bool() == Some(true) => Some(echo(body)),
        "/v1/completions" => Some(complete(body)),
        "/v1/embeddings" => Some(embed(body["input"].as_str().unwrap_or(""))),
        _ => None,
    }
}

fn hash(parts: &[&str]) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// Whitespace-led tokens: each token is a run of whitespace followed by a
/// run of non-whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() && in_word {
            out.push(std::mem::take(&mut cur));
            in_word = false;
        }
        in_word |= !c.is_whitespace();
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Natural-log probability of `token` after `prefix`.
pub fn token_logprob(prefix: &str, token: &str) -> f64 {
    -0.05 - (hash(&[prefix, token]) % 1000) as f64 / 250.0
}

fn alternatives(prefix: &str, token: &str) -> Value {
    let lp = token_logprob(prefix, token);
    let alt = (1.0 - lp.exp()).max(1e-9).ln() - 0.1;
    json!({ token: lp, " <alt>": alt })
}

const OPENERS: [&str; 5] = ["First,", "We note that", "Carefully,", "Step by step,", "In short,"];

fn complete(body: &Value) -> Value {
    let prompt = body["prompt"].as_str().unwrap_or("");
    let n = body["n"].as_u64().unwrap_or(1) as usize;
    let seed = body["seed"].as_u64().unwrap_or(0).to_string();
    let choices: Vec<Value> = (0..n)
        .map(|k| {
            let text = if prompt.contains("most consistent response") {
                " 2".to_string()
            } else {
                let ans = 10 + hash(&[prompt, &seed, &k.to_string()]) % 3;
                format!("{} the sum is {ans}. The answer is {ans}.", OPENERS[k % OPENERS.len()])
            };
            let toks = tokenize(&text);
            let mut prefix = prompt.to_string();
            let mut lps = Vec::new();
            for t in &toks {
                lps.push(token_logprob(&prefix, t));
                prefix.push_str(t);
            }
            let mut c = json!({"index": k, "text": text, "finish_reason": "stop"});
            if body.get("logprobs").is_some() {
                c["logprobs"] = json!({"tokens": toks, "token_logprobs": lps});
            }
            c
        })
        .collect();
    json!({"object": "text_completion", "choices": choices})
}

fn echo(body: &Value) -> Value {
    let prompt = body["prompt"].as_str().unwrap_or("");
    let toks = tokenize(prompt);
    let mut offsets = Vec::new();
    let mut lps = Vec::new();
    let mut tops = Vec::new();
    let mut prefix = String::new();
    for (j, t) in toks.iter().enumerate() {
        offsets.push(prefix.chars().count());
        if j == 0 {
            lps.push(Value::Null);
            tops.push(Value::Null);
        } else {
            lps.push(json!(token_logprob(&prefix, t)));
            tops.push(alternatives(&prefix, t));
        }
        prefix.push_str(t);
    }
    json!({"choices": [{"index": 0, "text": prompt, "logprobs": {
        "tokens": toks, "token_logprobs": lps, "text_offset": offsets, "top_logprobs": tops
    }}]})
}

fn embed(text: &str) -> Value {
    let mut v = vec![0.0f64; 16];
    for w in text.split_whitespace() {
        v[(hash(&[w]) % 16) as usize] += 1.0;
    }
    json!({"data": [{"index": 0, "embedding": v}]})
}
