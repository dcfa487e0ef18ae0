//! Semantic primitives, the domain-partitioned memory bank and dual-scope retrieval.

mod bank;
mod parse;
mod retrieve;

pub use bank::{BankEntry, MemoryBank};
pub use parse::{param_specs, parse_batch, parse_on_tape, parse_semantic, SemanticPrimitive};
pub use retrieve::{aggregate_similarity, retrieve, AlphaWeights, ContextItem, RetrievedContext, Scope};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum CsprError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate bank id `{0}`")]
    DuplicateId(String),
}
