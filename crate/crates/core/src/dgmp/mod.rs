//! Domain-guided prompting, pluggable report generation, confidence gating
//! and report embedding.

mod client;
mod embed;
mod gate;
mod http;
mod prompt;
mod stage;

pub use client::{ReasoningClient, ReasoningRequest, StubClient, INCONSISTENCY_PHRASE};
pub use embed::{Embedder, StubEmbedder};
pub use gate::{compute_confidence, gate_report, mean_cosine, AnalysisReport, GateInputs};
pub use http::{HttpChatClient, HttpEmbedder, HttpSettings, RetryPolicy};
pub use prompt::{build_prompt, references_from, Reference};
pub use stage::{ReportEngine, ReportJob, ReportOutcome};

#[derive(Debug, thiserror::Error)]
pub enum DgmpError {
    #[error("backend request failed after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },
    #[error("backend returned an unusable response: {0}")]
    BadResponse(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has dimension {actual}, expected {expected}")]
    EmbeddingDim { expected: usize, actual: usize },
    #[error("missing setting: {0}")]
    Missing(String),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}
