use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    contexts_for, evaluate, evaluate_with_contexts, train, Backends, Evaluation, Metrics, Model, TrainError,
    TrainOutcome,
};
use crate::config::{TrainConfig, Variant};
use crate::corpus::{lodo_split, split, Domain, VideoRecord};
use crate::cspr::{aggregate_similarity, AlphaWeights, ContextItem, MemoryBank, RetrievedContext, Scope, SemanticPrimitive};

/// Train/validate/test on the stratified split of `corpus`.
pub struct GeneralRun {
    pub outcome: TrainOutcome,
    pub test: Evaluation,
    pub test_records: Vec<VideoRecord>,
}

pub fn general_run(cfg: &TrainConfig, corpus: &[VideoRecord], backends: &Backends) -> Result<GeneralRun, TrainError> {
    let (tr, va, te) = split(corpus, cfg.split_ratios(), cfg.seed)?;
    let outcome = train(cfg, &tr, &va, backends)?;
    let test = evaluate(&outcome.model, &te, backends)?;
    Ok(GeneralRun {
        outcome,
        test,
        test_records: te,
    })
}

/// A general run of one ablated variant.
pub fn ablate(
    cfg: &TrainConfig,
    corpus: &[VideoRecord],
    variant: Variant,
    backends: &Backends,
) -> Result<GeneralRun, TrainError> {
    let mut c = cfg.clone();
    c.variant = variant;
    general_run(&c, corpus, backends)
}

pub struct LodoRun {
    pub target: Domain,
    pub outcome: TrainOutcome,
    pub test: Evaluation,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains on every source domain and tests on `target`.
///
/// Fails with a protocol error if a target-domain record reaches training
/// or the memory bank.
pub fn lodo(cfg: &TrainConfig, corpus: &[VideoRecord], target: Domain, backends: &Backends) -> Result<LodoRun, TrainError> {
    let (tr, te) = lodo_split(corpus, target)?;
    let leaked = tr.iter().filter(|r| r.domain == target).count();
    if leaked != 0 {
        return Err(TrainError::Protocol(format!("{leaked} {target} records in the training split")));
    }
    let outcome = train(cfg, &tr, &[], backends)?;
    let in_bank = outcome.model.bank.partition(target).len()
        + outcome
            .model
            .bank
            .entries()
            .iter()
            .filter(|e| e.domain == target)
            .count();
    if in_bank != 0 {
        return Err(TrainError::Protocol(format!("{target} entries in the memory bank")));
    }
    let test = evaluate(&outcome.model, &te, backends)?;
    Ok(LodoRun {
        target,
        train_size: tr.len(),
        test_size: te.len(),
        outcome,
        test,
    })
}

/// Replaces `ceil(ratio * |items|)` members of every context with uniformly
/// drawn bank entries other than the query itself, then re-sorts.
pub fn perturb_contexts(
    contexts: &[RetrievedContext],
    queries: &[(&VideoRecord, &SemanticPrimitive)],
    bank: &MemoryBank,
    alpha: &AlphaWeights,
    ratio: f64,
    seed: u64,
) -> Result<Vec<RetrievedContext>, TrainError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TrainError::InvalidValue(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(contexts.len());
    for (ctx, (record, prim)) in contexts.iter().zip(queries) {
        let mut ctx = ctx.clone();
        let len = ctx.items.len();
        // The small offset keeps e.g. 0.1 * 10 from rounding up to 2.
        let k = ((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize;
        let eligible = bank.entries().iter().filter(|e| e.id != record.id).count();
        if k == 0 || eligible == 0 {
            out.push(ctx);
            continue;
        }
        let positions = sample(&mut rng, len, k.min(len)).into_vec();
        for pos in positions {
            let mut pick = None;
            for _ in 0..64 {
                let j = rng.random_range(0..bank.len());
                let e = &bank.entries()[j];
                if e.id == record.id {
                    continue;
                }
                pick = Some(j);
                if !ctx.items.iter().any(|it| it.id == e.id) {
                    break;
                }
            }
            let Some(j) = pick else { continue };
            let e = &bank.entries()[j];
            ctx.items[pos] = ContextItem {
                id: e.id.clone(),
                score: aggregate_similarity(prim, &e.primitive, alpha)?,
                label: e.label,
                domain: e.domain,
                scope: if e.domain == record.domain {
                    Scope::Intra
                } else {
                    Scope::Cross
                },
                entry: j,
            };
        }
        ctx.sort();
        out.push(ctx);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub ratio: f64,
    pub metrics: Metrics,
}

/// Metrics of the frozen model under increasingly noisy retrieval.
pub fn noise_robustness(
    model: &Model,
    records: &[VideoRecord],
    ratios: &[f64],
    seed: u64,
    backends: &Backends,
) -> Result<Vec<RobustnessPoint>, TrainError> {
    let refs: Vec<&VideoRecord> = records.iter().collect();
    let (prims, ctx) = contexts_for(&model.params, &model.cfg, &model.bank, &refs)?;
    let queries: Vec<(&VideoRecord, &SemanticPrimitive)> = refs.iter().copied().zip(&prims).collect();
    let alpha = AlphaWeights::from_logits(model.cfg.alpha_logits());
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let noisy = perturb_contexts(&ctx, &queries, &model.bank, &alpha, r, seed)?;
        let ev = evaluate_with_contexts(model, records, noisy, backends)?;
        out.push(RobustnessPoint {
            ratio: r,
            metrics: ev.metrics,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Total retrieval size, split evenly between intra and cross domain.
    K,
    DS,
    Tau,
    Lambda,
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k" | "K" => Ok(SweepParam::K),
            "d_s" => Ok(SweepParam::DS),
            "tau" => Ok(SweepParam::Tau),
            "lambda" => Ok(SweepParam::Lambda),
            _ => Err(format!("unknown sweep parameter `{s}`; expected k, d_s, tau or lambda")),
        }
    }
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::DS => "d_s",
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
        }
    }

    /// `cfg` with the swept value applied.
    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig, TrainError> {
        let mut c = cfg.clone();
        let whole = |v: f64| -> Result<usize, TrainError> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(TrainError::InvalidValue(format!("{} needs a whole number, got {v}", self.as_str())))
            }
        };
        match self {
            SweepParam::K => {
                let k = whole(value)?;
                c.k_intra = k.div_ceil(2);
                c.k_cross = k / 2;
            }
            SweepParam::DS => {
                let d = whole(value)?;
                if d == 0 {
                    return Err(TrainError::InvalidValue("d_s must be positive".into()));
                }
                c.d_s = d;
            }
            SweepParam::Tau => c.tau = value,
            SweepParam::Lambda => c.lambda = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub metrics: Metrics,
}

/// One general run per value with everything else fixed.
pub fn sensitivity_sweep(
    cfg: &TrainConfig,
    corpus: &[VideoRecord],
    param: SweepParam,
    values: &[f64],
    backends: &Backends,
) -> Result<Vec<SweepRow>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::InvalidValue("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (c, &v) in configs.iter().zip(values) {
        let run = general_run(c, corpus, backends)?;
        rows.push(SweepRow {
            param: param.as_str().to_string(),
            value: v,
            metrics: run.test.metrics,
        });
    }
    Ok(rows)
}
