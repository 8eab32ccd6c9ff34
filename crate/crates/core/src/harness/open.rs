//! Builds backends from URL strings.

use std::path::PathBuf;
use std::sync::Arc;

use super::config::BackendsConfig;
use super::HarnessError;
use crate::backend::cache::{Cache, CacheStats, Cached};
use crate::backend::fixture::{FixtureBackend, Recorder};
use crate::backend::http::{OpenAiBackend, OpenAiConfig, ENV_BASE_URL};
use crate::backend::mock::{ContextFree, HashingEmbedder, UniformMock};
use crate::backend::synthetic::{NoiseModelBackend, NoiseModelSpec};
use crate::backend::{Backend, BackendInfo, Backends, SharedBackend};

/// Backends plus handles to their caches, for hit-rate reporting.
pub struct OpenedBackends {
    pub backends: Backends,
    pub caches: Vec<Arc<Cache>>,
}

impl OpenedBackends {
    pub fn cache_stats(&self) -> CacheStats {
        self.caches
            .iter()
            .fold(CacheStats::default(), |acc, c| acc.merge(c.stats()))
    }

    /// `(role, identity)` pairs used for config fingerprints.
    pub fn identities(&self) -> Vec<(&'static str, BackendInfo)> {
        let b = &self.backends;
        let mut out = vec![("generator", b.generator.info()), ("estimator", b.estimator.info())];
        if let Some(e) = &b.embedder {
            out.push(("embedder", e.info()));
        }
        out
    }
}

fn bad(url: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("backend {url:?}: {why}"))
}

/// Opens one backend URL without caching or recording.
pub fn open_url(url: &str, cfg: &BackendsConfig) -> Result<SharedBackend, HarnessError> {
    if let Some(inner) = url.strip_prefix("context-free:") {
        return Ok(Arc::new(ContextFree(open_url(inner, cfg)?)));
    }
    if url.starts_with("http://") || url.starts_with("https://") || url == "openai" {
        let base = if url == "openai" {
            std::env::var(ENV_BASE_URL).map_err(|_| bad(url, format!("{ENV_BASE_URL} is not set")))?
        } else {
            url.to_string()
        };
        let model = cfg.model.clone().ok_or_else(|| bad(url, "no model configured"))?;
        let mut oc = OpenAiConfig::new(base, model);
        oc.embedding_model = cfg.embedding_model.clone();
        oc.generation_api = cfg.generation_api;
        oc.echo_scoring = cfg.echo_scoring;
        oc.logprob_base = cfg.logprob_base;
        return Ok(Arc::new(OpenAiBackend::new(oc).map_err(|e| bad(url, e))?));
    }
    let (scheme, arg) = url.split_once(':').ok_or_else(|| bad(url, "unknown scheme"))?;
    match scheme {
        "synthetic" => {
            let text = std::fs::read_to_string(arg).map_err(|e| bad(url, e))?;
            let spec: NoiseModelSpec = serde_json::from_str(&text).map_err(|e| bad(url, e))?;
            Ok(Arc::new(NoiseModelBackend::new(spec).map_err(|e| bad(url, e))?))
        }
        "fixture" => Ok(Arc::new(FixtureBackend::open(arg).map_err(|e| bad(url, e))?)),
        "uniform" => {
            let v: usize = arg.parse().map_err(|e| bad(url, e))?;
            if v < 2 {
                return Err(bad(url, "vocabulary must be >= 2"));
            }
            Ok(Arc::new(UniformMock::new(v)))
        }
        "hash" => {
            let d: usize = arg.parse().map_err(|e| bad(url, e))?;
            if d == 0 {
                return Err(bad(url, "dimension must be >= 1"));
            }
            Ok(Arc::new(HashingEmbedder::new(d)))
        }
        _ => Err(bad(url, "unknown scheme")),
    }
}

fn wrap(
    backend: SharedBackend,
    role: &str,
    cfg: &BackendsConfig,
    caches: &mut Vec<Arc<Cache>>,
) -> Result<SharedBackend, HarnessError> {
    let mut b = backend;
    if let Some(dir) = &cfg.record {
        let dir: PathBuf = dir.join(role);
        b = Arc::new(Recorder::new(b, dir).map_err(|e| HarnessError::Io(e.to_string()))?);
    }
    if let Some(dir) = &cfg.cache {
        let cache = Arc::new(Cache::open(dir, b.info()).map_err(|e| HarnessError::Io(e.to_string()))?);
        caches.push(cache.clone());
        b = Arc::new(Cached::new(b, cache));
    }
    Ok(b)
}

/// Opens the generator, estimator and embedder. Roles that share a URL
/// share one backend instance.
pub fn open_backends(cfg: &BackendsConfig) -> Result<OpenedBackends, HarnessError> {
    let gen_url = cfg
        .generator
        .clone()
        .ok_or_else(|| HarnessError::Config("no generator backend configured".into()))?;
    let est_url = cfg.estimator.clone().unwrap_or_else(|| gen_url.clone());
    let emb_url = cfg.embedder.clone().unwrap_or_else(|| est_url.clone());

    let mut caches = Vec::new();
    let mut opened: Vec<(String, SharedBackend)> = Vec::new();
    let mut get = |url: &str, role: &str| -> Result<SharedBackend, HarnessError> {
        if let Some((_, b)) = opened.iter().find(|(u, _)| u == url) {
            return Ok(b.clone());
        }
        let b = wrap(open_url(url, cfg)?, role, cfg, &mut caches)?;
        opened.push((url.to_string(), b.clone()));
        Ok(b)
    };
    let generator = get(&gen_url, "generator")?;
    let estimator = get(&est_url, "estimator")?;
    let embedder = get(&emb_url, "embedder")?;
    let same_model = cfg.same_model.unwrap_or(gen_url == est_url);
    Ok(OpenedBackends {
        backends: Backends {
            generator,
            estimator,
            embedder: Some(embedder),
            same_model,
        },
        caches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_urls_share_instances() {
        let cfg = BackendsConfig {
            generator: Some("uniform:4".into()),
            embedder: Some("hash:8".into()),
            ..Default::default()
        };
        let o = open_backends(&cfg).unwrap();
        assert!(Arc::ptr_eq(&o.backends.generator, &o.backends.estimator));
        assert!(o.backends.same_model);
        assert_eq!(o.backends.embedder.as_ref().unwrap().info().backend_id, "hash-embed");
        assert_eq!(o.identities().len(), 3);
    }

    #[test]
    fn bad_urls_are_config_errors() {
        let cfg = BackendsConfig::default();
        for url in ["nope", "uniform:x", "uniform:1", "hash:0", "ftp:x", "https://h/v1"] {
            assert!(matches!(open_url(url, &cfg), Err(HarnessError::Config(_))), "{url}");
        }
        assert!(open_backends(&cfg).is_err());
    }

    #[test]
    fn cache_wraps_each_backend_once() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackendsConfig {
            generator: Some("uniform:4".into()),
            embedder: Some("hash:8".into()),
            cache: Some(dir.path().into()),
            ..Default::default()
        };
        let o = open_backends(&cfg).unwrap();
        assert_eq!(o.caches.len(), 2);
        let _ = o.backends.embedder.as_ref().unwrap().embed("x").unwrap();
        let _ = o.backends.embedder.as_ref().unwrap().embed("x").unwrap();
        assert_eq!(o.cache_stats().hits, 1);
    }
}
