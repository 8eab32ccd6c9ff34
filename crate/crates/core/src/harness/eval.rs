//! Evaluation loop and run reports.
//!
//! A report is line-delimited JSON: one header, one row per dataset record
//! in dataset order, one aggregate line, then a `# `-prefixed human summary.
//! Everything in it is a function of the inputs, so identical runs produce
//! identical bytes. Wall-clock latency and cache statistics vary between
//! runs and go to a `.stats.json` sidecar instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::{RandomConvention, RunConfig};
use super::dataset::DatasetRecord;
use super::open::OpenedBackends;
use super::HarnessError;
use crate::backend::cache::CacheStats;
use crate::engine::extract::canonical;
use crate::engine::{BackwardMode, Engine, EngineError, Selector, TaskInstance};
use crate::types::{Candidate, FewShotSet, ScoreBreakdown, SelectionResult};

pub const REPORT_VERSION: u32 = 1;
/// Runs with a larger share of failed queries exit nonzero.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Maps a selector name to an engine selector; `seed` feeds the random pick.
pub fn parse_selector(name: &str, default_mode: BackwardMode, seed: u64) -> Result<Selector, HarnessError> {
    Ok(match name {
        "referi" => Selector::Referi(default_mode),
        "referi-full" => Selector::Referi(BackwardMode::Full),
        "referi-approx" => Selector::Referi(BackwardMode::Approx),
        "forward" => Selector::Referi(BackwardMode::None),
        "backward" => Selector::Referi(BackwardMode::BackwardOnly),
        "random" => Selector::Random { seed },
        "majority" => Selector::Majority,
        "cotwp" => Selector::CotWp,
        "usc" => Selector::Usc,
        other => return Err(HarnessError::Config(format!("unknown selector {other:?}"))),
    })
}

/// Per-record seed: a hash of the run seed and the record id.
pub fn derive_seed(seed: u64, id: &str, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((id.len() as u64).to_le_bytes());
    h.update(id.as_bytes());
    h.update(stream.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn candidate_hash(response: &str) -> String {
    hex::encode(&Sha256::digest(response.as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    pub message: String,
}

impl From<&EngineError> for ErrorRow {
    fn from(e: &EngineError) -> Self {
        Self {
            phase: e.phase.to_string(),
            candidate: e.candidate,
            message: e.cause.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub selector: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Accuracy credit for this query (0 or 1, or the candidate-average for
    /// the averaged random convention).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credit: Option<f64>,
    #[serde(default)]
    pub tie_broken: bool,
    /// Per-candidate selection scores; `null` marks an excluded candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_example: Option<usize>,
    /// Full breakdowns, kept when the engine retains token scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdowns: Option<Vec<ScoreBreakdown>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    pub candidates: Vec<String>,
    pub candidate_hashes: Vec<String>,
    /// Canonical extracted answer per candidate.
    pub answers: Vec<Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_candidates: Option<Vec<bool>>,
    pub selections: Vec<SelectionRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRow>,
}

impl QueryRow {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.selections.iter().any(|s| s.error.is_some())
    }

    pub fn selection(&self, selector: &str) -> Option<&SelectionRow> {
        self.selections.iter().find(|s| s.selector == selector)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorAggregate {
    pub accuracy: Option<f64>,
    pub credit: f64,
    pub graded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub selectors: BTreeMap<String, SelectorAggregate>,
    pub records: usize,
    pub failures: usize,
    pub excluded_ids: Vec<String>,
    pub random_convention: RandomConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config_fingerprint: String,
    pub config: Value,
    pub selectors: Vec<String>,
    pub dataset_sha256: String,
    pub few_shot_sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ReportLine {
    Header(Header),
    Query(QueryRow),
    Aggregate(Aggregate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub header: Header,
    pub rows: Vec<QueryRow>,
    pub aggregate: Aggregate,
}

/// Run-to-run varying measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub latency_ms: BTreeMap<String, f64>,
    pub mean_latency_ms: f64,
    pub wall_ms: f64,
    pub cache: CacheStats,
    pub cache_hit_rate: f64,
}

fn json_sha(v: &impl Serialize) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializes")))
}

fn selection_row(
    name: &str,
    r: Result<SelectionResult, EngineError>,
    correct: Option<&[bool]>,
    convention: RandomConvention,
    keep_breakdowns: bool,
) -> SelectionRow {
    let mut row = SelectionRow {
        selector: name.to_string(),
        selected_index: None,
        correct: None,
        credit: None,
        tie_broken: false,
        scores: None,
        forward: None,
        backward: None,
        relevant_example: None,
        breakdowns: None,
        error: None,
    };
    let r = match r {
        Ok(r) => r,
        Err(e) => {
            row.error = Some((&e).into());
            return row;
        }
    };
    row.selected_index = Some(r.selected_index);
    row.tie_broken = r.tie_broken;
    if let Some(c) = correct {
        let hit = c[r.selected_index];
        row.correct = Some(hit);
        row.credit = Some(if name == "random" && convention == RandomConvention::Averaged {
            c.iter().filter(|&&x| x).count() as f64 / c.len() as f64
        } else if hit {
            1.0
        } else {
            0.0
        });
    }
    if !r.breakdowns.is_empty() {
        row.scores = Some(r.breakdowns.iter().map(|b| Some(b.final_score)).collect());
        row.forward = Some(r.breakdowns.iter().map(|b| b.forward).collect());
        if r.breakdowns.iter().any(|b| b.backward().is_some()) {
            row.backward = Some(r.breakdowns.iter().map(|b| b.backward()).collect());
        }
        if keep_breakdowns {
            row.breakdowns = Some(r.breakdowns);
        }
    } else if let Some(s) = r.baseline_scores {
        row.scores = Some(s);
    }
    row.relevant_example = r.metadata.get("relevant_example").and_then(|s| s.parse().ok());
    row
}

fn process(
    engine: &Engine,
    cfg: &RunConfig,
    few_shot: &FewShotSet,
    rec: &DatasetRecord,
    selectors: &[String],
) -> Result<(QueryRow, f64), HarnessError> {
    let start = Instant::now();
    let seed = cfg.engine.seed.unwrap_or(0);
    let task = TaskInstance {
        few_shot: few_shot.clone(),
        test_query: rec.query.clone(),
        gold: rec.gold.clone(),
    };
    let mut row = QueryRow {
        id: rec.id.clone(),
        gold: rec.gold.clone(),
        candidates: Vec::new(),
        candidate_hashes: Vec::new(),
        answers: Vec::new(),
        correct_candidates: None,
        selections: Vec::new(),
        error: None,
    };
    let cands: Vec<Candidate> = match engine.generate(&task, Some(derive_seed(seed, &rec.id, "generate"))) {
        Ok(c) => c,
        Err(e) => {
            row.error = Some((&e).into());
            return Ok((row, start.elapsed().as_secs_f64() * 1e3));
        }
    };
    row.candidates = cands.iter().map(|c| c.response.clone()).collect();
    row.candidate_hashes = cands.iter().map(|c| candidate_hash(&c.response)).collect();
    row.answers = cands
        .iter()
        .map(|c| engine.extractor().extract(&c.response).map(|a| canonical(&a)))
        .collect();
    row.correct_candidates = rec.gold.as_ref().map(|g| {
        let g = canonical(g);
        row.answers.iter().map(|a| a.as_deref() == Some(g.as_str())).collect()
    });
    for name in selectors {
        let sel = parse_selector(name, cfg.engine.backward_mode, derive_seed(seed, &rec.id, "random"))?;
        let r = engine.select(sel, &task, &cands);
        row.selections.push(selection_row(
            name,
            r,
            row.correct_candidates.as_deref(),
            cfg.eval.random_convention,
            cfg.engine.retain_tokens,
        ));
    }
    Ok((row, start.elapsed().as_secs_f64() * 1e3))
}

pub fn aggregate(rows: &[QueryRow], selectors: &[String], convention: RandomConvention) -> Aggregate {
    let excluded_ids: Vec<String> = rows.iter().filter(|r| r.failed()).map(|r| r.id.clone()).collect();
    let selectors = selectors
        .iter()
        .map(|name| {
            let credits: Vec<f64> = rows
                .iter()
                .filter(|r| !r.failed())
                .filter_map(|r| r.selection(name).and_then(|s| s.credit))
                .collect();
            let credit: f64 = credits.iter().sum();
            let agg = SelectorAggregate {
                accuracy: (!credits.is_empty()).then(|| credit / credits.len() as f64),
                credit,
                graded: credits.len(),
            };
            (name.clone(), agg)
        })
        .collect();
    Aggregate {
        selectors,
        records: rows.len(),
        failures: excluded_ids.len(),
        excluded_ids,
        random_convention: convention,
    }
}

/// Runs every selector over shared candidates for each record.
pub fn eval_run(
    records: &[DatasetRecord],
    few_shot: &FewShotSet,
    cfg: &RunConfig,
    opened: &OpenedBackends,
) -> Result<(RunReport, RunStats), HarnessError> {
    let selectors = cfg.eval.selectors.clone();
    if selectors.is_empty() {
        return Err(HarnessError::Config("no selectors requested".into()));
    }
    for s in &selectors {
        parse_selector(s, cfg.engine.backward_mode, 0)?;
    }
    let engine =
        Engine::new(cfg.engine.clone(), opened.backends.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let ids = opened.identities();
    let header = Header {
        version: REPORT_VERSION,
        config_fingerprint: cfg.fingerprint(&ids),
        config: cfg.fingerprint_material(&ids),
        selectors: selectors.clone(),
        dataset_sha256: json_sha(&records),
        few_shot_sha256: json_sha(few_shot),
        records: records.len(),
    };
    let wall = Instant::now();
    let results = engine.install(|| {
        records
            .par_iter()
            .map(|rec| process(&engine, cfg, few_shot, rec, &selectors))
            .collect::<Vec<_>>()
    });
    let mut rows = Vec::with_capacity(records.len());
    let mut latency_ms = BTreeMap::new();
    for r in results {
        let (row, ms) = r?;
        latency_ms.insert(row.id.clone(), ms);
        rows.push(row);
    }
    let aggregate = aggregate(&rows, &selectors, cfg.eval.random_convention);
    let cache = opened.cache_stats();
    let stats = RunStats {
        mean_latency_ms: latency_ms.values().sum::<f64>() / latency_ms.len().max(1) as f64,
        latency_ms,
        wall_ms: wall.elapsed().as_secs_f64() * 1e3,
        cache_hit_rate: cache.hit_rate(),
        cache,
    };
    Ok((
        RunReport {
            header,
            rows,
            aggregate,
        },
        stats,
    ))
}

impl RunReport {
    pub fn failure_rate(&self) -> f64 {
        self.aggregate.failures as f64 / self.rows.len().max(1) as f64
    }

    pub fn accuracy(&self, selector: &str) -> Option<f64> {
        self.aggregate.selectors.get(selector).and_then(|a| a.accuracy)
    }

    pub fn row(&self, id: &str) -> Option<&QueryRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        let _ = writeln!(s, "# config {}", &self.header.config_fingerprint[..16]);
        let _ = writeln!(
            s,
            "# {} records, {} failed ({:.1}%), random convention {:?}",
            a.records,
            a.failures,
            100.0 * self.failure_rate(),
            a.random_convention
        );
        for (name, agg) in &a.selectors {
            match agg.accuracy {
                Some(acc) => {
                    let _ = writeln!(
                        s,
                        "# {name:<14} accuracy {:6.2}%  ({:.1}/{})",
                        100.0 * acc,
                        agg.credit,
                        agg.graded
                    );
                }
                None => {
                    let _ = writeln!(s, "# {name:<14} accuracy n/a");
                }
            }
        }
        if !a.excluded_ids.is_empty() {
            let _ = writeln!(s, "# excluded: {}", a.excluded_ids.join(", "));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: ReportLine| {
            out.push_str(&serde_json::to_string(&line).expect("report line serializes"));
            out.push('\n');
        };
        push(ReportLine::Header(self.header.clone()));
        for r in &self.rows {
            push(ReportLine::Query(r.clone()));
        }
        push(ReportLine::Aggregate(self.aggregate.clone()));
        out + &self.summary()
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let (mut header, mut aggregate, mut rows) = (None, None, Vec::new());
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parsed: ReportLine = serde_json::from_str(line).map_err(|e| HarnessError::Malformed {
                path: "report".into(),
                line: n + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ReportLine::Header(h) => header = Some(h),
                ReportLine::Query(q) => rows.push(q),
                ReportLine::Aggregate(a) => aggregate = Some(a),
            }
        }
        let missing = |what: &str| HarnessError::Config(format!("report has no {what} line"));
        Ok(Self {
            header: header.ok_or_else(|| missing("header"))?,
            rows,
            aggregate: aggregate.ok_or_else(|| missing("aggregate"))?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Writes the report and its `.stats.json` sidecar.
    pub fn write(&self, path: impl AsRef<Path>, stats: &RunStats) -> Result<(), HarnessError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, self.to_jsonl()).map_err(io)?;
        let stats_json = serde_json::to_string_pretty(stats).expect("stats serialize");
        fs::write(stats_path(path), stats_json + "\n").map_err(io)
    }
}

pub fn stats_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, credits: &[(&str, f64)], failed: bool) -> QueryRow {
        QueryRow {
            id: id.into(),
            gold: Some("g".into()),
            candidates: vec![],
            candidate_hashes: vec![],
            answers: vec![],
            correct_candidates: None,
            selections: credits
                .iter()
                .map(|(n, c)| SelectionRow {
                    selector: n.to_string(),
                    selected_index: Some(0),
                    correct: Some(*c == 1.0),
                    credit: Some(*c),
                    tie_broken: false,
                    scores: None,
                    forward: None,
                    backward: None,
                    relevant_example: None,
                    breakdowns: None,
                    error: None,
                })
                .collect(),
            error: failed.then(|| ErrorRow {
                phase: "generation".into(),
                candidate: None,
                message: "x".into(),
            }),
        }
    }

    #[test]
    fn aggregate_is_mean_credit_over_successful_rows() {
        let rows = vec![
            row("a", &[("referi", 1.0), ("random", 0.4)], false),
            row("b", &[("referi", 0.0), ("random", 0.2)], false),
            row("c", &[("referi", 1.0), ("random", 1.0)], true),
        ];
        let sel = vec!["referi".to_string(), "random".to_string()];
        let a = aggregate(&rows, &sel, RandomConvention::Averaged);
        assert_eq!(a.selectors["referi"].accuracy, Some(0.5));
        assert!((a.selectors["random"].accuracy.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(a.failures, 1);
        assert_eq!(a.excluded_ids, vec!["c".to_string()]);
    }

    #[test]
    fn selector_names() {
        assert_eq!(
            parse_selector("referi", BackwardMode::Full, 0).unwrap(),
            Selector::Referi(BackwardMode::Full)
        );
        assert_eq!(
            parse_selector("forward", BackwardMode::Full, 0).unwrap(),
            Selector::Referi(BackwardMode::None)
        );
        assert!(parse_selector("leap", BackwardMode::Full, 0).is_err());
    }

    #[test]
    fn seeds_depend_on_id_and_stream() {
        assert_eq!(derive_seed(7, "a", "g"), derive_seed(7, "a", "g"));
        assert_ne!(derive_seed(7, "a", "g"), derive_seed(7, "b", "g"));
        assert_ne!(derive_seed(7, "a", "g"), derive_seed(7, "a", "r"));
        assert_ne!(derive_seed(7, "a", "g"), derive_seed(8, "a", "g"));
    }

    #[test]
    fn stats_sidecar_path() {
        assert_eq!(
            stats_path(Path::new("out/r.jsonl")),
            PathBuf::from("out/r.jsonl.stats.json")
        );
    }
}
