//! Python bindings: scoring functions, prompt construction, synthetic
//! suites, evaluation runs, and an `Engine` class for selection.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use referi::backend::synthetic::TaskKind;
use referi::engine::{BackwardMode, Engine as CoreEngine, TaskInstance};
use referi::harness::attribution::mask_size as core_mask_size;
use referi::harness::config::RunConfig;
use referi::harness::dataset::{load_dataset, load_few_shot};
use referi::harness::eval::{eval_run as core_eval_run, parse_selector};
use referi::harness::open::open_backends;
use referi::harness::synth::{synth_task, SynthParams};
use referi::prompt::{build_backward_contexts, leave_one_out_replace, DemonstrationTemplate};
use referi::types::{Candidate, Example, FewShotSet, SelectionResult as CoreResult, TokenScore};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn few_shot(pairs: Vec<(String, String)>) -> PyResult<FewShotSet> {
    let examples = pairs
        .into_iter()
        .map(|(q, a)| Example::new(q, a))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    FewShotSet::new(examples).map_err(value_err)
}

fn tokens(logprobs: &[f64]) -> Vec<TokenScore> {
    logprobs.iter().map(|&lp| TokenScore::new("", lp)).collect()
}

/// Sum of token logprobs.
#[pyfunction]
fn forward_score(logprobs: Vec<f64>) -> PyResult<f64> {
    referi::score::forward_score(&tokens(&logprobs)).map_err(value_err)
}

/// Mean of `conditioned - unconditioned` over `(conditioned, unconditioned)` pairs.
#[pyfunction]
fn backward_full_score(terms: Vec<(f64, f64)>) -> PyResult<f64> {
    referi::score::backward_full_score(&terms).map_err(value_err)
}

#[pyfunction]
fn backward_approx_score(conditioned: f64, unconditioned: f64) -> PyResult<f64> {
    referi::score::backward_approx_score(conditioned, unconditioned).map_err(value_err)
}

#[pyfunction]
fn final_score(forward: f64, backward: f64) -> PyResult<f64> {
    referi::score::final_score(forward, backward).map_err(value_err)
}

/// Returns `(index, tied)`: the lowest index of the maximum and whether it is shared.
#[pyfunction]
fn select_argmax(scores: Vec<f64>) -> PyResult<(usize, bool)> {
    referi::score::select_argmax(&scores).map_err(value_err)
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    referi::retrieval::cosine(&u, &v).map_err(value_err)
}

#[pyfunction]
fn mask_size(t: usize) -> usize {
    core_mask_size(t)
}

#[pyfunction]
fn canonical(s: &str) -> String {
    referi::engine::extract::canonical(s)
}

/// Few-shot pairs with position `i` replaced by `test_pair`.
#[pyfunction]
fn leave_one_out(
    examples: Vec<(String, String)>,
    i: usize,
    test_pair: (String, String),
) -> PyResult<Vec<(String, String)>> {
    let pair = Example::new(test_pair.0, test_pair.1).map_err(value_err)?;
    let out = leave_one_out_replace(&few_shot(examples)?, i, &pair).map_err(value_err)?;
    Ok(out.iter().map(|e| (e.query.clone(), e.answer.clone())).collect())
}

/// `((context, continuation), (context, continuation))` for the conditioned
/// and unconditioned backward terms of example `i`, with the default template.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn backward_contexts(
    examples: Vec<(String, String)>,
    i: usize,
    test_pair: (String, String),
) -> PyResult<((String, String), (String, String))> {
    let pair = Example::new(test_pair.0, test_pair.1).map_err(value_err)?;
    let (c, u) = build_backward_contexts(&few_shot(examples)?, i, &pair, &DemonstrationTemplate::default())
        .map_err(value_err)?;
    Ok(((c.context, c.continuation), (u.context, u.continuation)))
}

/// Writes a synthetic suite (few-shot, dataset, backend spec, config) to `out`.
#[pyfunction]
#[pyo3(signature = (kind, out, size=200, sigma=2.0, delta=1.5, p_correct=0.35, shots=4, seed=7))]
#[allow(clippy::too_many_arguments)]
fn synth(
    kind: &str,
    out: &str,
    size: usize,
    sigma: f64,
    delta: f64,
    p_correct: f64,
    shots: usize,
    seed: u64,
) -> PyResult<usize> {
    let kind: TaskKind = kind.parse().map_err(value_err)?;
    let mut p = SynthParams::new(kind, size, sigma, delta, seed);
    p.p_correct = p_correct;
    p.shots = shots;
    let suite = synth_task(&p).map_err(value_err)?;
    suite.write(out).map_err(runtime_err)?;
    Ok(suite.dataset.len())
}

/// Runs an evaluation and writes the report. Returns accuracy per selector.
#[pyfunction]
#[pyo3(signature = (config, dataset, few_shot, report, selectors=None))]
fn eval_run(
    py: Python<'_>,
    config: &str,
    dataset: &str,
    few_shot: &str,
    report: &str,
    selectors: Option<Vec<String>>,
) -> PyResult<BTreeMap<String, Option<f64>>> {
    let mut cfg = RunConfig::load(config).map_err(value_err)?;
    if let Some(s) = selectors {
        cfg.eval.selectors = s;
    }
    let records = load_dataset(dataset).map_err(value_err)?;
    let shots = load_few_shot(few_shot).map_err(value_err)?;
    let report = report.to_string();
    py.detach(move || {
        let opened = open_backends(&cfg.backends).map_err(value_err)?;
        let (r, stats) = core_eval_run(&records, &shots, &cfg, &opened).map_err(runtime_err)?;
        r.write(&report, &stats).map_err(runtime_err)?;
        Ok(r.aggregate
            .selectors
            .iter()
            .map(|(k, v)| (k.clone(), v.accuracy))
            .collect())
    })
}

#[pyclass(frozen, module = "referi")]
struct SelectionResult {
    inner: CoreResult,
}

#[pymethods]
impl SelectionResult {
    #[getter]
    fn selected_index(&self) -> usize {
        self.inner.selected_index
    }

    #[getter]
    fn selected(&self) -> String {
        self.inner.candidates[self.inner.selected_index].response.clone()
    }

    #[getter]
    fn candidates(&self) -> Vec<String> {
        self.inner.candidates.iter().map(|c| c.response.clone()).collect()
    }

    #[getter]
    fn final_scores(&self) -> Vec<f64> {
        self.inner.breakdowns.iter().map(|b| b.final_score).collect()
    }

    #[getter]
    fn forward_scores(&self) -> Vec<f64> {
        self.inner.breakdowns.iter().map(|b| b.forward).collect()
    }

    #[getter]
    fn backward_scores(&self) -> Vec<Option<f64>> {
        self.inner.breakdowns.iter().map(|b| b.backward()).collect()
    }

    #[getter]
    fn tie_broken(&self) -> bool {
        self.inner.tie_broken
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SelectionResult(selected_index={}, candidates={}, tie_broken={})",
            self.inner.selected_index,
            self.inner.candidates.len(),
            if self.inner.tie_broken { "True" } else { "False" }
        )
    }
}

/// Selection engine over backends given as URLs (see the CLI for schemes).
#[pyclass(frozen, module = "referi")]
struct Engine {
    inner: CoreEngine,
    mode: BackwardMode,
    seed: Option<u64>,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (backend=None, estimator=None, embedder=None, model=None, mode="approx", k=5, temperature=1.0, seed=None, config=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        backend: Option<String>,
        estimator: Option<String>,
        embedder: Option<String>,
        model: Option<String>,
        mode: &str,
        k: usize,
        temperature: f64,
        seed: Option<u64>,
        config: Option<String>,
    ) -> PyResult<Self> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).map_err(value_err)?,
            None => RunConfig::default(),
        };
        let b = &mut cfg.backends;
        b.generator = backend.or(b.generator.take());
        b.estimator = estimator.or(b.estimator.take());
        b.embedder = embedder.or(b.embedder.take());
        b.model = model.or(b.model.take());
        let mode: BackwardMode = mode.parse().map_err(value_err)?;
        cfg.engine.backward_mode = mode;
        cfg.engine.k = k;
        cfg.engine.temperature = temperature;
        cfg.engine.seed = seed.or(cfg.engine.seed);
        let opened = open_backends(&cfg.backends).map_err(value_err)?;
        let seed = cfg.engine.seed;
        let inner = CoreEngine::new(cfg.engine, opened.backends).map_err(value_err)?;
        Ok(Self { inner, mode, seed })
    }

    /// Selects among `candidates` (generated when omitted) for `query`.
    #[pyo3(signature = (few_shot, query, candidates=None, selector="referi"))]
    fn select(
        &self,
        py: Python<'_>,
        few_shot: Vec<(String, String)>,
        query: String,
        candidates: Option<Vec<String>>,
        selector: &str,
    ) -> PyResult<SelectionResult> {
        let task = TaskInstance::new(self::few_shot(few_shot)?, query);
        let sel = parse_selector(selector, self.mode, self.seed.unwrap_or(0)).map_err(value_err)?;
        let cands = candidates
            .map(|cs| {
                cs.into_iter()
                    .enumerate()
                    .map(|(i, c)| Candidate::new(i, c))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()
            .map_err(value_err)?;
        let inner = py.detach(|| {
            let cands = match cands {
                Some(c) => c,
                None => self.inner.generate(&task, self.seed).map_err(runtime_err)?,
            };
            self.inner.select(sel, &task, &cands).map_err(runtime_err)
        })?;
        Ok(SelectionResult { inner })
    }
}

#[pymodule]
#[pyo3(name = "referi")]
fn referi_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(forward_score, m)?)?;
    m.add_function(wrap_pyfunction!(backward_full_score, m)?)?;
    m.add_function(wrap_pyfunction!(backward_approx_score, m)?)?;
    m.add_function(wrap_pyfunction!(final_score, m)?)?;
    m.add_function(wrap_pyfunction!(select_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(mask_size, m)?)?;
    m.add_function(wrap_pyfunction!(canonical, m)?)?;
    m.add_function(wrap_pyfunction!(leave_one_out, m)?)?;
    m.add_function(wrap_pyfunction!(backward_contexts, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(eval_run, m)?)?;
    m.add_class::<Engine>()?;
    m.add_class::<SelectionResult>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_exposes_scoring_and_engine() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "referi").unwrap();
            referi_module(&m).unwrap();
            let f: f64 = m
                .getattr("forward_score")
                .unwrap()
                .call1((vec![-1.0, -0.25],))
                .unwrap()
                .extract()
                .unwrap();
            assert_eq!(f, -1.25);
            let (i, tied): (usize, bool) = m
                .getattr("select_argmax")
                .unwrap()
                .call1((vec![1.0, 3.0, 3.0],))
                .unwrap()
                .extract()
                .unwrap();
            assert_eq!((i, tied), (1, true));
            let err = m.getattr("cosine").unwrap().call1((vec![0.0], vec![1.0])).unwrap_err();
            assert!(err.is_instance_of::<PyValueError>(py));
            assert!(m.getattr("Engine").is_ok());
        });
    }

    #[test]
    fn engine_scores_given_candidates() {
        let engine = Engine::new(
            Some("uniform:4".into()),
            None,
            Some("hash:8".into()),
            None,
            "full",
            5,
            1.0,
            Some(1),
            None,
        )
        .unwrap();
        Python::initialize();
        Python::attach(|py| {
            let r = engine
                .select(
                    py,
                    vec![("q".into(), "a b".into())],
                    "t".into(),
                    Some(vec!["x".into(), "y z".into()]),
                    "referi",
                )
                .unwrap();
            assert_eq!(r.candidates().len(), 2);
            assert_eq!(r.final_scores().len(), 2);
        });
    }
}
