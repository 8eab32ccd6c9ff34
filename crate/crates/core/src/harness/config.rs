//! Run configuration, loadable from TOML, and its fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::backend::http::GenerationApi;
use crate::backend::synthetic::NoiseModelSpec;
use crate::backend::BackendInfo;
use crate::engine::{BackwardMode, EngineConfig};

/// How the no-selection baseline is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomConvention {
    /// Mean correctness over all K candidates (expected accuracy of a random pick).
    #[default]
    Averaged,
    /// Correctness of one seeded uniform draw.
    SingleDraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    /// Backend URL: `http(s)://...`, `openai` (base from the environment),
    /// `synthetic:SPEC.json`, `fixture:DIR`, `uniform:V`, `hash:DIM`, or
    /// `context-free:<url>`.
    pub generator: Option<String>,
    /// Defaults to the generator.
    pub estimator: Option<String>,
    /// Defaults to the estimator.
    pub embedder: Option<String>,
    pub model: Option<String>,
    pub embedding_model: Option<String>,
    pub generation_api: GenerationApi,
    pub echo_scoring: bool,
    pub logprob_base: f64,
    /// Whether generator and estimator are the same model; defaults to
    /// whether their URLs are equal.
    pub same_model: Option<bool>,
    pub cache: Option<PathBuf>,
    pub record: Option<PathBuf>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            generator: None,
            estimator: None,
            embedder: None,
            model: None,
            embedding_model: None,
            generation_api: GenerationApi::Completions,
            echo_scoring: true,
            logprob_base: std::f64::consts::E,
            same_model: None,
            cache: None,
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub selectors: Vec<String>,
    pub random_convention: RandomConvention,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            selectors: vec!["referi".into(), "random".into()],
            random_convention: RandomConvention::Averaged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub backends: BackendsConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a TOML file. Relative backend paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.backends.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Config shipped with a synthetic suite.
    pub fn for_synthetic(spec: &NoiseModelSpec) -> Self {
        let mut cfg = RunConfig::default();
        cfg.engine.template = spec.template.clone();
        cfg.engine.answer_marker = spec.answer_marker.clone();
        cfg.engine.backward_mode = BackwardMode::Approx;
        cfg.engine.seed = Some(spec.seed);
        cfg.backends.generator = Some(format!("synthetic:{}", super::synth::BACKEND_FILE));
        cfg.backends.embedder = Some("hash:256".into());
        cfg.eval.selectors = ["referi", "forward", "random", "majority", "cotwp"]
            .map(String::from)
            .to_vec();
        cfg
    }

    /// Hash of every setting that can change results. Execution-only
    /// settings (concurrency, cache and recording directories) are left out
    /// and backends are identified by what they report about themselves
    /// rather than by where they were loaded from.
    pub fn fingerprint(&self, backends: &[(&str, BackendInfo)]) -> String {
        let v = self.fingerprint_material(backends);
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn fingerprint_material(&self, backends: &[(&str, BackendInfo)]) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["engine"].as_object_mut().expect("table").remove("max_concurrency");
        let b = v["backends"].as_object_mut().expect("table");
        for k in ["generator", "estimator", "embedder", "cache", "record"] {
            b.remove(k);
        }
        let ids: serde_json::Map<String, Value> = backends
            .iter()
            .map(|(role, info)| (role.to_string(), json!(info)))
            .collect();
        b.insert("identity".into(), Value::Object(ids));
        v
    }
}

impl BackendsConfig {
    fn resolve_paths(&mut self, base: &Path) {
        for url in [&mut self.generator, &mut self.estimator, &mut self.embedder]
            .into_iter()
            .flatten()
        {
            *url = resolve_url(url, base);
        }
        for dir in [&mut self.cache, &mut self.record].into_iter().flatten() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }
}

fn resolve_url(url: &str, base: &Path) -> String {
    if let Some(inner) = url.strip_prefix("context-free:") {
        return format!("context-free:{}", resolve_url(inner, base));
    }
    for scheme in ["synthetic:", "fixture:"] {
        if let Some(p) = url.strip_prefix(scheme) {
            if Path::new(p).is_relative() {
                return format!("{scheme}{}", base.join(p).display());
            }
        }
    }
    url.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids() -> Vec<(&'static str, BackendInfo)> {
        vec![("generator", BackendInfo::new("synthetic", "m1"))]
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.engine.seed = Some(3);
        cfg.backends.generator = Some("uniform:4".into());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("[engine]\nk = 3\nbackward_mode = \"full\"\n").unwrap();
        assert_eq!(cfg.engine.k, 3);
        assert_eq!(cfg.engine.backward_mode, BackwardMode::Full);
        assert_eq!(cfg.engine.temperature, 1.0);
    }

    #[test]
    fn fingerprint_tracks_result_affecting_fields_only() {
        let base = RunConfig::default();
        let fp = base.fingerprint(&ids());
        let mut c = base.clone();
        c.engine.k = 4;
        assert_ne!(c.fingerprint(&ids()), fp);
        let mut c = base.clone();
        c.engine.template.separator = "\n".into();
        assert_ne!(c.fingerprint(&ids()), fp);
        let mut c = base.clone();
        c.eval.random_convention = RandomConvention::SingleDraw;
        assert_ne!(c.fingerprint(&ids()), fp);
        assert_ne!(
            base.fingerprint(&[("generator", BackendInfo::new("synthetic", "m2"))]),
            fp
        );

        let mut c = base.clone();
        c.engine.max_concurrency = 1;
        c.backends.cache = Some("/tmp/x".into());
        c.backends.generator = Some("synthetic:/elsewhere.json".into());
        assert_eq!(c.fingerprint(&ids()), fp);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let base = Path::new("/data/suite");
        assert_eq!(
            resolve_url("synthetic:backend.json", base),
            "synthetic:/data/suite/backend.json"
        );
        assert_eq!(
            resolve_url("context-free:fixture:fx", base),
            "context-free:fixture:/data/suite/fx"
        );
        assert_eq!(resolve_url("http://h/v1", base), "http://h/v1");
    }
}
