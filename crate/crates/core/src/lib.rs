//! Best-of-K response selection for few-shot prompting.
//!
//! Each sampled candidate is scored by how likely the model finds it given
//! the demonstrations (forward) minus how much it helps the model
//! re-predict a demonstration's answer (backward).

pub mod backend;
pub mod engine;
pub mod error;
pub mod harness;
pub mod prompt;
pub mod retrieval;
pub mod score;
pub mod types;
