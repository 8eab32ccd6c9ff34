//! Content-addressed response cache.
//!
//! One namespace directory per backend id, each holding an append-only
//! `entries.jsonl` of `{"k": key, "v": response}` lines. Keys are
//! `sha256(backend_id, model_id, request bytes)`. Reads are concurrent;
//! writes are serialized and a write of a present key is a no-op.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::fixture::RequestKind;
use super::{Backend, BackendError, BackendInfo, GenerationRequest, LikelihoodRequest, LikelihoodResponse};
use crate::types::Candidate;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }

    pub fn merge(self, other: CacheStats) -> CacheStats {
        CacheStats {
            lookups: self.lookups + other.lookups,
            hits: self.hits + other.hits,
            misses: self.misses + other.misses,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    k: String,
    v: Value,
}

pub struct Cache {
    enabled: bool,
    info: BackendInfo,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<Option<File>>,
    lookups: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
}

fn namespace(backend_id: &str) -> String {
    backend_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Cache {
    /// Opens (or creates) the namespace for `info.backend_id` under `dir`.
    pub fn open(dir: impl AsRef<Path>, info: BackendInfo) -> Result<Self, BackendError> {
        let ns: PathBuf = dir.as_ref().join(namespace(&info.backend_id));
        fs::create_dir_all(&ns)?;
        let path = ns.join("entries.jsonl");
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                match serde_json::from_str::<Line>(&line) {
                    Ok(l) => {
                        entries.insert(l.k, l.v);
                    }
                    Err(e) => log::warn!("{}:{}: skipping corrupt cache entry: {e}", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            enabled: true,
            info,
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            lookups: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// Process-local cache with no persistence.
    pub fn in_memory(info: BackendInfo) -> Self {
        Self {
            enabled: true,
            info,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            lookups: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn disabled(info: BackendInfo) -> Self {
        Self {
            enabled: false,
            ..Self::in_memory(info)
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            lookups: self.lookups.load(Ordering::Relaxed),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn key(&self, key_material: &[u8]) -> String {
        let mut h = Sha256::new();
        for part in [
            self.info.backend_id.as_bytes(),
            self.info.model_id.as_bytes(),
            key_material,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        hex::encode(h.finalize())
    }

    /// Returns the stored response for `key_material`, or runs `op`, stores
    /// its result, and returns it. Errors from `op` are never cached.
    pub fn lookup_or_call<T, F>(&self, key_material: &[u8], op: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        if !self.enabled {
            return op();
        }
        self.lookups.fetch_add(1, Ordering::Relaxed);
        let key = self.key(key_material);
        let stored = self.entries.read().expect("cache lock").get(&key).cloned();
        let mut corrupt = false;
        if let Some(v) = stored {
            match serde_json::from_value::<T>(v) {
                Ok(t) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(t);
                }
                Err(e) => {
                    log::warn!("corrupt cache entry {key}, treating as miss: {e}");
                    corrupt = true;
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let out = op()?;
        let value = serde_json::to_value(&out).map_err(|e| BackendError::Protocol(e.to_string()))?;
        self.store(key, value, corrupt)?;
        Ok(out)
    }

    fn store(&self, key: String, value: Value, replace: bool) -> Result<(), BackendError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(&key) && !replace {
                return Ok(());
            }
            entries.insert(key.clone(), value.clone());
        }
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_vec(&Line { k: key, v: value }).expect("line serializes");
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        Ok(())
    }
}

/// Any backend, with responses served from a [`Cache`] where possible.
pub struct Cached<B> {
    inner: B,
    cache: Arc<Cache>,
}

impl<B: Backend> Cached<B> {
    pub fn new(inner: B, cache: Arc<Cache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &Arc<Cache> {
        &self.cache
    }

    fn material<Q: Serialize + ?Sized>(kind: RequestKind, req: &Q) -> Vec<u8> {
        let mut m = kind.as_str().as_bytes().to_vec();
        m.push(0);
        m.extend(serde_json::to_vec(req).expect("request serializes"));
        m
    }
}

impl<B: Backend> Backend for Cached<B> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
        self.cache
            .lookup_or_call(&Self::material(RequestKind::Generate, req), || self.inner.generate(req))
    }

    fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
        self.cache.lookup_or_call(&Self::material(RequestKind::Score, req), || {
            self.inner.score_continuation(req)
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.cache
            .lookup_or_call(&Self::material(RequestKind::Embed, text), || self.inner.embed(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::UniformMock;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        calls: AtomicUsize,
    }

    impl Backend for Counting {
        fn info(&self) -> BackendInfo {
            BackendInfo::new("counting", "m1")
        }
        fn score_continuation(&self, req: &LikelihoodRequest) -> Result<LikelihoodResponse, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            UniformMock::new(8).score_continuation(req)
        }
        fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![Candidate::new(0, format!("t={}", req.temperature)).unwrap()])
        }
    }

    fn counting() -> Counting {
        Counting {
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn identical_requests_call_backend_once() {
        let b = Cached::new(counting(), Arc::new(Cache::in_memory(counting().info())));
        let req = LikelihoodRequest::new("ctx", "abc");
        let first = b.score_continuation(&req).unwrap();
        let second = b.score_continuation(&req).unwrap();
        assert_eq!(
            serde_json::to_vec(&first).unwrap(),
            serde_json::to_vec(&second).unwrap()
        );
        assert_eq!(b.inner.calls.load(Ordering::SeqCst), 1);
        assert_eq!(
            b.cache().stats(),
            CacheStats {
                lookups: 2,
                hits: 1,
                misses: 1
            }
        );
    }

    #[test]
    fn temperature_changes_key() {
        let b = Cached::new(counting(), Arc::new(Cache::in_memory(counting().info())));
        let mut req = GenerationRequest::new("ctx", 1, 1.0);
        b.generate(&req).unwrap();
        req.temperature = 0.5;
        b.generate(&req).unwrap();
        assert_eq!(b.inner.calls.load(Ordering::SeqCst), 2);
        assert_eq!(b.cache().stats().hits, 0);
    }

    #[test]
    fn disabled_cache_does_no_lookups() {
        let b = Cached::new(counting(), Arc::new(Cache::disabled(counting().info())));
        let req = LikelihoodRequest::new("ctx", "abc");
        b.score_continuation(&req).unwrap();
        b.score_continuation(&req).unwrap();
        assert_eq!(b.inner.calls.load(Ordering::SeqCst), 2);
        assert_eq!(b.cache().stats().lookups, 0);
    }

    #[test]
    fn persists_across_reopen_and_skips_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let req = LikelihoodRequest::new("ctx", "abc");
        {
            let cache = Arc::new(Cache::open(dir.path(), counting().info()).unwrap());
            Cached::new(counting(), cache).score_continuation(&req).unwrap();
        }
        let file = dir.path().join("counting").join("entries.jsonl");
        let mut text = fs::read_to_string(&file).unwrap();
        text.push_str("{not json\n");
        fs::write(&file, text).unwrap();

        let b = Cached::new(
            counting(),
            Arc::new(Cache::open(dir.path(), counting().info()).unwrap()),
        );
        b.score_continuation(&req).unwrap();
        assert_eq!(b.inner.calls.load(Ordering::SeqCst), 0);
        assert_eq!(b.cache().stats().hit_rate(), 1.0);
    }

    #[test]
    fn corrupt_value_is_a_miss() {
        let cache = Cache::in_memory(BackendInfo::new("x", "y"));
        cache.lookup_or_call(b"k", || Ok("not a number".to_string())).unwrap();
        let v: f64 = cache.lookup_or_call(b"k", || Ok(1.5)).unwrap();
        assert_eq!(v, 1.5);
        let again: f64 = cache.lookup_or_call(b"k", || Ok(9.0)).unwrap();
        assert_eq!(again, 1.5);
    }

    #[test]
    fn model_id_is_part_of_key() {
        let a = Cache::in_memory(BackendInfo::new("b", "m1"));
        let b = Cache::in_memory(BackendInfo::new("b", "m2"));
        assert_ne!(a.key(b"req"), b.key(b"req"));
    }
}
