//! Losses, optimizer, training loop, metrics, checkpoints and experiment
//! harnesses.

mod checkpoint;
mod harness;
mod loss;
mod metrics;
mod model;
mod optim;
mod reports;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};
pub use harness::{
    ablate, general_run, lodo, noise_robustness, perturb_contexts, sensitivity_sweep, GeneralRun, LodoRun,
    RobustnessPoint, SweepParam, SweepRow,
};
pub use loss::{bce, bce_on_tape, total_loss};
pub use metrics::{ClassMetrics, Confusion, Metrics};
pub use model::{effective_lambda, forward_probs, model_specs, record_loss, uses_reasoning, BatchLoss, SampleInput};
pub use optim::AdamW;
pub use reports::{build_reports, contexts_for, Backends, ReportBook, SampleReports};
pub use schedule::lr_at;
pub use trainer::{evaluate, evaluate_with_contexts, train, EpochRecord, Evaluation, Model, TrainOutcome};

use crate::alignment::AlignError;
use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::cspr::CsprError;
use crate::dgmp::DgmpError;
use crate::mvdff::MvdffError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cspr(#[from] CsprError),
    #[error(transparent)]
    Dgmp(#[from] DgmpError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Mvdff(#[from] MvdffError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss {loss} at epoch {epoch} on batch [{}]; parameter norms: {norms}", ids.join(", "))]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        ids: Vec<String>,
        norms: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

impl TrainError {
    /// True for failures of the reasoning or embedding backend.
    pub fn is_backend(&self) -> bool {
        matches!(self, TrainError::Dgmp(DgmpError::Backend { .. } | DgmpError::BadResponse(_) | DgmpError::EmptyCompletion))
    }
}
