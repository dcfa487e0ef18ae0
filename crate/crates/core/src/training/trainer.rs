use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reports::build_reports;
use super::{
    bce, contexts_for, forward_probs, lr_at, model_specs, record_loss, uses_reasoning, AdamW, Backends, Metrics,
    ReportBook, RngState, SampleInput, TrainError,
};
use crate::config::TrainConfig;
use crate::corpus::{validate_records, VideoRecord};
use crate::cspr::{MemoryBank, RetrievedContext};
use crate::nn::init_store;
use crate::numerics::ParamStore;

/// Trained parameters with the bank frozen after the final epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub bank: MemoryBank,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub rng: RngState,
    pub train_reports: ReportBook,
}

fn samples<'a>(records: &'a [VideoRecord], book: &'a ReportBook) -> Vec<SampleInput<'a>> {
    records
        .iter()
        .zip(&book.parsing)
        .map(|(record, parsing)| SampleInput { record, parsing })
        .collect()
}

fn norms_digest(params: &ParamStore) -> String {
    params
        .norms()
        .iter()
        .map(|(k, v)| format!("{k}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains on `train`, reporting validation metrics per epoch when `val` is
/// nonempty.
pub fn train(
    cfg: &TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    backends: &Backends,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training split"));
    }
    validate_records(train, &cfg.feature_dims())?;
    if !val.is_empty() {
        validate_records(val, &cfg.feature_dims())?;
    }
    let engine = backends.engine(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_store(&model_specs(cfg)?, &mut rng);
    let mut bank = MemoryBank::build(train, &params, cfg)?;

    let train_refs: Vec<&VideoRecord> = train.iter().collect();
    let val_refs: Vec<&VideoRecord> = val.iter().collect();
    let (_, train_ctx) = contexts_for(&params, cfg, &bank, &train_refs)?;
    if uses_reasoning(cfg) {
        let raw = build_reports(&engine, cfg, &bank, &train_refs, &train_ctx, false)?;
        bank = bank.with_reports(raw.stored());
    }
    let train_book = build_reports(&engine, cfg, &bank, &train_refs, &train_ctx, true)?;
    let val_book = if val.is_empty() {
        None
    } else {
        let (_, ctx) = contexts_for(&params, cfg, &bank, &val_refs)?;
        Some(build_reports(&engine, cfg, &bank, &val_refs, &ctx, true)?)
    };
    let train_samples = samples(train, &train_book);
    let val_samples = val_book.as_ref().map(|b| samples(val, b));

    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg, epoch);
        bank = bank.refresh(&params, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleInput> = chunk.iter().map(|&i| train_samples[i]).collect();
            let bl = record_loss(&params, cfg, &bank, &batch)?;
            let loss = bl.value();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    loss,
                    epoch,
                    ids: batch.iter().map(|s| s.record.id.clone()).collect(),
                    norms: norms_digest(&params),
                });
            }
            let grads = bl.tape.backward(bl.loss)?;
            opt.step(&mut params, &grads, lr);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_accuracy, val_macro_f1) = match &val_samples {
            Some(vs) => {
                let probs = forward_probs(&params, cfg, vs)?;
                let labels: Vec<_> = val.iter().map(|r| r.label).collect();
                let loss = mean_bce(&probs, val);
                let m = Metrics::from_predictions(&probs, &labels);
                (Some(loss), Some(m.accuracy), Some(m.macro_f1))
            }
            None => (None, None, None),
        };
        log::info!(
            "epoch {epoch}/{}: train_loss={train_loss:.5} val_accuracy={} lr={lr:.3e}",
            cfg.epochs,
            val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            val_macro_f1,
            lr,
        });
    }
    let params = params.quantized_f32();
    let bank = bank.refresh(&params, cfg)?;
    Ok(TrainOutcome {
        model: Model {
            cfg: cfg.clone(),
            params,
            bank,
        },
        history,
        rng: RngState::capture(&rng),
        train_reports: train_book,
    })
}

fn mean_bce(probs: &[f64], records: &[VideoRecord]) -> f64 {
    let mut s = 0.0;
    for (p, r) in probs.iter().zip(records) {
        s += bce(*p, r.label.as_f64());
    }
    s / records.len() as f64
}

/// Predictions and metrics of a frozen model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub probs: Vec<f64>,
    /// Mean classification loss.
    pub loss: f64,
    pub contexts: Vec<RetrievedContext>,
    pub reports: ReportBook,
}

pub fn evaluate(model: &Model, records: &[VideoRecord], backends: &Backends) -> Result<Evaluation, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation set"));
    }
    let refs: Vec<&VideoRecord> = records.iter().collect();
    let (_, ctx) = contexts_for(&model.params, &model.cfg, &model.bank, &refs)?;
    evaluate_with_contexts(model, records, ctx, backends)
}

/// Evaluation with externally supplied retrieval results.
pub fn evaluate_with_contexts(
    model: &Model,
    records: &[VideoRecord],
    contexts: Vec<RetrievedContext>,
    backends: &Backends,
) -> Result<Evaluation, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation set"));
    }
    let cfg = &model.cfg;
    validate_records(records, &cfg.feature_dims())?;
    let engine = backends.engine(cfg)?;
    let refs: Vec<&VideoRecord> = records.iter().collect();
    let book = build_reports(&engine, cfg, &model.bank, &refs, &contexts, true)?;
    let probs = forward_probs(&model.params, cfg, &samples(records, &book))?;
    let labels: Vec<_> = records.iter().map(|r| r.label).collect();
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&probs, &labels),
        loss: mean_bce(&probs, records),
        probs,
        contexts,
        reports: book,
    })
}
