//! Deterministic synthetic suites paired with a noise-model backend spec.
//!
//! `arithmetic` asks for two-digit sums with templated reasoning. `mapping`
//! asks to decode three made-up symbols whose meanings are only given by the
//! demonstrations: the few-shot set partitions the symbol lexicon, so every
//! symbol is defined exactly once.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_jsonl, DatasetRecord};
use super::HarnessError;
use crate::backend::synthetic::{NoiseModelSpec, TaskEntry, TaskKind};
use crate::engine::extract::DEFAULT_MARKER;
use crate::prompt::DemonstrationTemplate;
use crate::types::{Example, FewShotSet};

const SYMBOLS: [&str; 12] = [
    "blick", "dax", "wug", "fep", "zorp", "mib", "tove", "gorp", "quil", "snee", "vrak", "plon",
];
const MEANINGS: [&str; 12] = [
    "red", "blue", "green", "gold", "gray", "pink", "teal", "jade", "rust", "navy", "plum", "sand",
];
const SYMBOLS_PER_QUERY: usize = 3;
const DEMO_OPENER: &str = "Step by step:";
const NUM_DISTRACTORS: usize = 4;

pub const FEW_SHOT_FILE: &str = "few_shot.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const BACKEND_FILE: &str = "backend.json";
pub const CONFIG_FILE: &str = "referi.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub kind: TaskKind,
    pub size: usize,
    pub shots: usize,
    pub sigma: f64,
    pub delta: f64,
    pub p_correct: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(kind: TaskKind, size: usize, sigma: f64, delta: f64, seed: u64) -> Self {
        Self {
            kind,
            size,
            shots: 4,
            sigma,
            delta,
            p_correct: 0.35,
            seed,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidParams(m));
        if self.size == 0 {
            return bad("size must be >= 1".into());
        }
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("sigma and delta must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.p_correct) {
            return bad("p_correct must be in [0, 1]".into());
        }
        if self.kind == TaskKind::Mapping {
            if self.shots * SYMBOLS_PER_QUERY != SYMBOLS.len() {
                return bad(format!(
                    "mapping needs exactly {} shots",
                    SYMBOLS.len() / SYMBOLS_PER_QUERY
                ));
            }
            let capacity = 12 * 11 * 10 - self.shots;
            if self.size > capacity {
                return bad(format!("mapping supports at most {capacity} queries"));
            }
        }
        if self.kind == TaskKind::Arithmetic && self.size + self.shots > 90 * 90 {
            return bad("too many arithmetic queries".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSuite {
    pub few_shot: FewShotSet,
    pub dataset: Vec<DatasetRecord>,
    pub spec: NoiseModelSpec,
}

struct Item {
    query: String,
    stem: String,
    gold: String,
    distractors: Vec<String>,
}

pub fn synth_task(params: &SynthParams) -> Result<SynthSuite, HarnessError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ kind_salt(params.kind));
    let items = match params.kind {
        TaskKind::Arithmetic => arithmetic(params, &mut rng),
        TaskKind::Mapping => mapping(params, &mut rng),
    };
    let (demos, tests) = items.split_at(params.shots);
    let few_shot = FewShotSet::new(
        demos
            .iter()
            .map(|it| {
                let answer = params.kind.render_response(&it.stem, &it.gold, DEMO_OPENER);
                Example::new(it.query.clone(), answer).expect("non-empty")
            })
            .collect(),
    )
    .expect("shots >= 1");
    let dataset = tests
        .iter()
        .enumerate()
        .map(|(i, it)| DatasetRecord {
            id: format!("{}-{i:04}", params.kind.as_str()),
            query: it.query.clone(),
            gold: Some(it.gold.clone()),
        })
        .collect();
    let tasks: BTreeMap<String, TaskEntry> = tests
        .iter()
        .map(|it| {
            (
                it.query.clone(),
                TaskEntry {
                    stem: it.stem.clone(),
                    gold: it.gold.clone(),
                    distractors: it.distractors.clone(),
                },
            )
        })
        .collect();
    let spec = NoiseModelSpec {
        kind: params.kind,
        seed: params.seed,
        sigma: params.sigma,
        delta: params.delta,
        p_correct: params.p_correct,
        base_forward: -30.0,
        base_backward: -6.0,
        answer_marker: DEFAULT_MARKER.into(),
        template: DemonstrationTemplate::default(),
        tasks,
    };
    Ok(SynthSuite {
        few_shot,
        dataset,
        spec,
    })
}

fn kind_salt(kind: TaskKind) -> u64 {
    match kind {
        TaskKind::Arithmetic => 0x61726974,
        TaskKind::Mapping => 0x6d617070,
    }
}

/// First `shots` items are demonstrations, the rest test queries; all
/// queries are distinct.
fn arithmetic(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(params.size + params.shots);
    while out.len() < params.size + params.shots {
        let (a, b) = (rng.random_range(10..100u32), rng.random_range(10..100u32));
        if !seen.insert((a, b)) {
            continue;
        }
        let s = a + b;
        let distractors = [s + 1, s - 1, s + 10, s - 10, s + 2]
            .iter()
            .take(NUM_DISTRACTORS)
            .map(|d| d.to_string())
            .collect();
        out.push(Item {
            query: format!("What is {a} + {b}?"),
            stem: format!("{a} + {b}"),
            gold: s.to_string(),
            distractors,
        });
    }
    out
}

fn mapping(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let mut meanings: Vec<&str> = MEANINGS.to_vec();
    meanings.shuffle(rng);
    let lexicon: BTreeMap<&str, &str> = SYMBOLS.iter().copied().zip(meanings).collect();

    let item = |syms: &[&str], rng: &mut ChaCha8Rng| {
        let stem = syms.join(" ");
        let gold: Vec<&str> = syms.iter().map(|s| lexicon[s]).collect();
        let mut distractors = BTreeSet::new();
        while distractors.len() < NUM_DISTRACTORS {
            let mut wrong = gold.clone();
            let pos = rng.random_range(0..wrong.len());
            let alt = MEANINGS[rng.random_range(0..MEANINGS.len())];
            if alt == wrong[pos] {
                continue;
            }
            wrong[pos] = alt;
            distractors.insert(wrong.join(" "));
        }
        let mut distractors: Vec<String> = distractors.into_iter().collect();
        distractors.shuffle(rng);
        Item {
            query: format!("Decode: {stem}"),
            stem,
            gold: gold.join(" "),
            distractors,
        }
    };

    let mut symbols = SYMBOLS.to_vec();
    symbols.shuffle(rng);
    let demo_sets: Vec<Vec<&str>> = symbols.chunks(SYMBOLS_PER_QUERY).map(|c| c.to_vec()).collect();

    let mut triples = Vec::new();
    for a in SYMBOLS {
        for b in SYMBOLS {
            for c in SYMBOLS {
                if a != b && b != c && a != c {
                    triples.push(vec![a, b, c]);
                }
            }
        }
    }
    triples.retain(|t| !demo_sets.contains(t));
    triples.shuffle(rng);

    let mut out: Vec<Item> = demo_sets.iter().map(|s| item(s, rng)).collect();
    for t in triples.into_iter().take(params.size) {
        out.push(item(&t, rng));
    }
    out
}

impl SynthSuite {
    /// Writes the few-shot set, dataset, backend spec and a run config that
    /// points at them.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        write_jsonl(dir.join(FEW_SHOT_FILE), self.few_shot.examples())?;
        write_jsonl(dir.join(DATASET_FILE), &self.dataset)?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| HarnessError::Io(e.to_string()))?;
        fs::write(dir.join(BACKEND_FILE), spec + "\n").map_err(io)?;
        let cfg = super::config::RunConfig::for_synthetic(&self.spec);
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?).map_err(io)?;
        Ok(())
    }
}
