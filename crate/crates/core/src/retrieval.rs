//! Picks the few-shot example whose query embedding is closest (by cosine)
//! to the test query's.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::RetrievalError;
use crate::types::FewShotSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub selected_index: usize,
    pub similarities: Vec<f64>,
    pub tie_broken: bool,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::LengthMismatch(u.len(), v.len()));
    }
    if u.is_empty() {
        return Err(RetrievalError::Empty);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Embeddings of the few-shot queries, computed once and reused for every
/// test query.
#[derive(Debug, Clone)]
pub struct ExampleIndex {
    embeddings: Vec<Vec<f64>>,
}

impl ExampleIndex {
    pub fn build(examples: &FewShotSet, embedder: &dyn Backend) -> Result<Self, RetrievalError> {
        let embeddings = examples
            .iter()
            .map(|ex| embedder.embed(&ex.query))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn most_relevant(&self, test_query: &str, embedder: &dyn Backend) -> Result<RelevanceResult, RetrievalError> {
        let q = embedder.embed(test_query)?;
        self.most_relevant_to(&q)
    }

    pub fn most_relevant_to(&self, query_embedding: &[f64]) -> Result<RelevanceResult, RetrievalError> {
        let similarities = self
            .embeddings
            .iter()
            .map(|e| cosine(query_embedding, e))
            .collect::<Result<Vec<_>, _>>()?;
        let (selected_index, tie_broken) =
            crate::score::select_argmax(&similarities).map_err(|_| RetrievalError::Empty)?;
        Ok(RelevanceResult {
            selected_index,
            similarities,
            tie_broken,
        })
    }
}

/// One-shot convenience: embeds the examples and the query, returns the argmax.
pub fn most_relevant(
    test_query: &str,
    examples: &FewShotSet,
    embedder: &dyn Backend,
) -> Result<RelevanceResult, RetrievalError> {
    ExampleIndex::build(examples, embedder)?.most_relevant(test_query, embedder)
}
