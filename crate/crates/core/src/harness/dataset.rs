//! Line-delimited JSON files: few-shot sets `{query, answer}` and datasets
//! `{id, query, gold}`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::types::{Example, FewShotSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_line<T: serde::de::DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Malformed {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    })
}

pub fn parse_few_shot(path: &Path, text: &str) -> Result<FewShotSet, HarnessError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, l) in lines(text) {
        let ex: Example = parse_line(path, n, l)?;
        ex.validate().map_err(|e| HarnessError::Malformed {
            path: path.display().to_string(),
            line: n,
            message: e.to_string(),
        })?;
        if !seen.insert(ex.query.clone()) {
            log::warn!("{}:{n}: duplicate few-shot query {:?}", path.display(), ex.query);
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(HarnessError::Empty(path.display().to_string()));
    }
    Ok(FewShotSet::new(out).expect("validated above"))
}

pub fn load_few_shot(path: impl AsRef<Path>) -> Result<FewShotSet, HarnessError> {
    let path = path.as_ref();
    parse_few_shot(path, &read(path)?)
}

pub fn parse_dataset(path: &Path, text: &str) -> Result<Vec<DatasetRecord>, HarnessError> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (n, l) in lines(text) {
        let r: DatasetRecord = parse_line(path, n, l)?;
        let bad = |message: String| HarnessError::Malformed {
            path: path.display().to_string(),
            line: n,
            message,
        };
        if r.query.trim().is_empty() {
            return Err(bad("empty query".into()));
        }
        if !ids.insert(r.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", r.id)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(HarnessError::Empty(path.display().to_string()));
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, HarnessError> {
    let path = path.as_ref();
    parse_dataset(path, &read(path)?)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| HarnessError::Io(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&buf).map_err(|e| HarnessError::Io(e.to_string()))
}
