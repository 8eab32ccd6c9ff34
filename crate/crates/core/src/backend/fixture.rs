//! Recorded responses keyed by request hash.
//!
//! Layout of a fixture directory:
//!
//! ```text
//! manifest.json          {"backend_id": ..., "model_id": ...}
//! records/<sha256>.json  {"kind": ..., "request": ..., "response": ...}
//! ```
//!
//! Replay errors on any request that was never recorded, so a test run can
//! never fall through to a live endpoint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse};
use crate::types::Candidate;

const MANIFEST: &str = "manifest.json";
const RECORDS: &str = "records";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Generate,
    Score,
    Embed,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Generate => "generate",
            RequestKind::Score => "score",
            RequestKind::Embed => "embed",
        }
    }
}

/// Stable hash of a request of the given kind.
pub fn request_key<T: Serialize + ?Sized>(kind: RequestKind, request: &T) -> String {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update([0u8]);
    h.update(&bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    kind: String,
    request: Value,
    response: Value,
}

#[derive(Debug, Clone)]
pub struct FixtureBackend {
    info: BackendInfo,
    records: HashMap<String, Value>,
}

impl FixtureBackend {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        let info: BackendInfo = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
            .map_err(|e| BackendError::Protocol(format!("bad fixture manifest: {e}")))?;
        let mut records = HashMap::new();
        let rec_dir = dir.join(RECORDS);
        if rec_dir.is_dir() {
            for entry in fs::read_dir(&rec_dir)? {
                let path = entry?.path();
                let Some(key) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                let rec: Record = serde_json::from_slice(&fs::read(&path)?)
                    .map_err(|e| BackendError::Protocol(format!("bad fixture record {}: {e}", path.display())))?;
                records.insert(key.to_string(), rec.response);
            }
        }
        Ok(Self { info, records })
    }

    pub fn in_memory(info: BackendInfo) -> Self {
        Self {
            info,
            records: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert_generation(&mut self, req: &GenerationRequest, candidates: &[Candidate]) {
        self.insert(RequestKind::Generate, req, candidates);
    }

    pub fn insert_score(&mut self, req: &LikelihoodRequest, resp: &LikelihoodResponse) {
        self.insert(RequestKind::Score, req, resp);
    }

    pub fn insert_embedding(&mut self, text: &str, v: &[f64]) {
        self.insert(RequestKind::Embed, text, v);
    }

    fn insert<Q: Serialize + ?Sized, R: Serialize + ?Sized>(&mut self, kind: RequestKind, req: &Q, resp: &R) {
        self.records.insert(
            request_key(kind, req),
            serde_json::to_value(resp).expect("response serializes"),
        );
    }

    fn replay<Q: Serialize + ?Sized, R: DeserializeOwned>(
        &self,
        kind: RequestKind,
        req: &Q,
    ) -> Result<R, BackendError> {
        let key = request_key(kind, req);
        let value = self
            .records
            .get(&key)
            .ok_or_else(|| BackendError::Unrecorded(format!("{} {key}", kind.as_str())))?;
        serde_json::from_value(value.clone()).map_err(|e| BackendError::Protocol(format!("fixture {key}: {e}")))
    }
}

impl Backend for FixtureBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        self.replay(RequestKind::Generate, req)
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        self.replay(RequestKind::Score, req)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.replay(RequestKind::Embed, text)
    }
}

/// Passes calls through to `inner` and writes every successful response
/// into a fixture directory.
pub struct Recorder<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join(RECORDS))?;
        let manifest = serde_json::to_vec_pretty(&inner.info()).expect("info serializes");
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(Self { inner, dir })
    }

    fn record<Q: Serialize + ?Sized, R: Serialize>(
        &self,
        kind: RequestKind,
        req: &Q,
        resp: &R,
    ) -> Result<(), BackendError> {
        let key = request_key(kind, req);
        let path = self.dir.join(RECORDS).join(format!("{key}.json"));
        if path.exists() {
            return Ok(());
        }
        let rec = Record {
            kind: kind.as_str().into(),
            request: serde_json::to_value(req).expect("request serializes"),
            response: serde_json::to_value(resp).expect("response serializes"),
        };
        // write-then-rename so concurrent recorders never expose a torn file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(&rec).expect("record serializes"))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        let out = self.inner.generate(req)?;
        self.record(RequestKind::Generate, req, &out)?;
        Ok(out)
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        let out = self.inner.score_continuation(req)?;
        self.record(RequestKind::Score, req, &out)?;
        Ok(out)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let out = self.inner.embed(text)?;
        self.record(RequestKind::Embed, text, &out)?;
        Ok(out)
    }
}
