use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("{0} must be non-empty")]
    EmptyField(&'static str),
    #[error("few-shot set must contain at least one example")]
    EmptyFewShot,
    #[error("logprob must be <= 0, got {0}")]
    PositiveLogprob(f64),
    #[error("top alternatives must be sorted by descending logprob")]
    UnsortedAlternatives,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("empty response")]
    EmptyResponse,
    #[error("non-finite logprob")]
    NonFiniteLogprob,
    #[error("non-finite score input")]
    NonFinite,
    #[error("backward score needs at least one example")]
    EmptyExamples,
    #[error("cannot select from an empty score list")]
    EmptyScores,
    #[error("insufficient top-k depth")]
    InsufficientTopK,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template example_block must contain {{query}} once followed by {{answer}} once")]
    BadExampleBlock,
    #[error("template query_block must contain {{query}} once and no {{answer}}")]
    BadQueryBlock,
    #[error("example index {index} out of range for {len} examples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty continuation")]
    EmptyContinuation,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("undefined similarity")]
    ZeroVector,
    #[error("empty vector")]
    Empty,
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}
