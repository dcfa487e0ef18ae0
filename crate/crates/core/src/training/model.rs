use super::{bce_on_tape, TrainError};
use crate::alignment::{self, align_loss_on_tape, mine_hard_negatives, parsing_on_tape, BatchCandidate, NegativeSet};
use crate::config::{TrainConfig, Variant};
use crate::corpus::{Modality, VideoRecord};
use crate::cspr::{self, retrieve, AlphaWeights, MemoryBank, RetrievedContext, SemanticPrimitive};
use crate::mvdff;
use crate::nn::ParamSpec;
use crate::numerics::{ParamStore, ParamVars, Tape, Tensor, Var};

pub fn uses_reasoning(cfg: &TrainConfig) -> bool {
    cfg.variant != Variant::NoReasoning
}

/// Weight of the alignment term actually applied for this variant.
pub fn effective_lambda(cfg: &TrainConfig) -> f64 {
    match cfg.variant {
        Variant::NoReasoning | Variant::NoAlignment => 0.0,
        _ => cfg.lambda,
    }
}

/// Every trainable tensor of the configured variant, in initialization order.
pub fn model_specs(cfg: &TrainConfig) -> Result<Vec<ParamSpec>, TrainError> {
    let mut v = cspr::param_specs(cfg);
    v.extend(alignment::param_specs(cfg));
    if cfg.variant == Variant::NoDecoupling {
        v.extend(mvdff::concat_specs(cfg));
    } else {
        v.extend(mvdff::fusion_specs(cfg)?);
    }
    v.extend(mvdff::classifier_specs(cfg));
    Ok(v)
}

/// A record with its three (possibly confidence-scaled) parsing features.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    pub record: &'a VideoRecord,
    pub parsing: &'a [Vec<f64>; 3],
}

fn raw_constants(tape: &mut Tape, cfg: &TrainConfig, samples: &[SampleInput<'_>]) -> Result<[Var; 3], TrainError> {
    let dims = cfg.feature_dims();
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let mut data = Vec::with_capacity(samples.len() * dims.get(m));
        for s in samples {
            let f = s.record.feature(m);
            if f.len() != dims.get(m) {
                return Err(TrainError::InvalidValue(format!(
                    "record {}: {} feature has length {}, expected {}",
                    s.record.id,
                    m.key(),
                    f.len(),
                    dims.get(m)
                )));
            }
            data.extend_from_slice(f);
        }
        out.push(tape.constant(Tensor::new(vec![samples.len(), dims.get(m)], data)?));
    }
    Ok([out[0], out[1], out[2]])
}

fn parsing_constants(tape: &mut Tape, cfg: &TrainConfig, samples: &[SampleInput<'_>]) -> Result<[Var; 3], TrainError> {
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let mut data = Vec::with_capacity(samples.len() * cfg.d_p);
        for s in samples {
            let p = &s.parsing[m.index()];
            if p.len() != cfg.d_p {
                return Err(TrainError::InvalidValue(format!(
                    "record {}: {} parsing feature has length {}, expected {}",
                    s.record.id,
                    m.key(),
                    p.len(),
                    cfg.d_p
                )));
            }
            data.extend_from_slice(p);
        }
        out.push(tape.constant(Tensor::new(vec![samples.len(), cfg.d_p], data)?));
    }
    Ok([out[0], out[1], out[2]])
}

/// Parsing-head outputs, or `None` when the variant has no reasoning path.
fn parsed_views(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    parsing: [Var; 3],
) -> Result<Option<[Var; 3]>, TrainError> {
    if !uses_reasoning(cfg) || cfg.variant == Variant::NoDecoupling {
        return Ok(None);
    }
    let mut v = Vec::with_capacity(3);
    for m in Modality::ALL {
        v.push(parsing_on_tape(tape, vars, m, parsing[m.index()])?);
    }
    Ok(Some([v[0], v[1], v[2]]))
}

fn head(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    raw: [Var; 3],
    parsing: [Var; 3],
    parsed: Option<[Var; 3]>,
) -> Result<Var, TrainError> {
    let h = if cfg.variant == Variant::NoDecoupling {
        mvdff::concat_fuse(tape, vars, raw, parsing)?
    } else {
        let mut enh = Vec::with_capacity(3);
        for m in Modality::ALL {
            let q = parsed.map(|p| p[m.index()]);
            enh.push(mvdff::enhance(tape, vars, cfg, m, raw[m.index()], q)?);
        }
        let (cons, _) = mvdff::consistency(tape, vars, raw)?;
        mvdff::gate_fuse(tape, vars, [enh[0], enh[1], enh[2]], cons)?.0
    };
    Ok(mvdff::classify(tape, vars, h)?)
}

const EVAL_CHUNK: usize = 256;

/// Fake-class probabilities, evaluated in fixed-size chunks.
pub fn forward_probs(params: &ParamStore, cfg: &TrainConfig, samples: &[SampleInput<'_>]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let raw = raw_constants(&mut tape, cfg, chunk)?;
        let parsing = parsing_constants(&mut tape, cfg, chunk)?;
        let parsed = parsed_views(&mut tape, &vars, cfg, parsing)?;
        let probs = head(&mut tape, &vars, cfg, raw, parsing, parsed)?;
        out.extend_from_slice(tape.value(probs).data());
    }
    Ok(out)
}

/// A recorded training loss and the pieces that produced it.
pub struct BatchLoss {
    pub tape: Tape,
    pub loss: Var,
    pub cls: f64,
    pub align: Option<f64>,
    pub probs: Vec<f64>,
    pub contexts: Vec<RetrievedContext>,
    pub negatives: Vec<NegativeSet>,
}

impl BatchLoss {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }
}

/// Records the full training objective for one batch.
///
/// Parses the batch, retrieves context from `bank`, mines hard negatives,
/// runs the fusion path and returns `BCE + lambda * align`. The alignment
/// branch (and with it retrieval) is skipped when the effective weight is 0.
pub fn record_loss(
    params: &ParamStore,
    cfg: &TrainConfig,
    bank: &MemoryBank,
    samples: &[SampleInput<'_>],
) -> Result<BatchLoss, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("batch"));
    }
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let raw = raw_constants(&mut tape, cfg, samples)?;
    let parsing = parsing_constants(&mut tape, cfg, samples)?;
    let lambda = effective_lambda(cfg);

    let mut contexts = Vec::new();
    let mut negatives = Vec::new();
    if lambda > 0.0 {
        if cfg.variant == Variant::NoRetrieval {
            contexts = vec![RetrievedContext::empty(); samples.len()];
        } else {
            let prim = cspr::parse_on_tape(&mut tape, &vars, cfg, raw[0], raw[1], raw[2])?;
            let vals: Vec<&Tensor> = prim.iter().map(|v| tape.value(*v)).collect();
            let alpha = AlphaWeights::from_logits(cfg.alpha_logits());
            for (i, s) in samples.iter().enumerate() {
                let q = SemanticPrimitive {
                    s: vals[0].row(i).to_vec(),
                    s_v: vals[1].row(i).to_vec(),
                    s_t: vals[2].row(i).to_vec(),
                    s_a: vals[3].row(i).to_vec(),
                };
                contexts.push(retrieve(
                    bank,
                    &q,
                    s.record.domain,
                    Some(&s.record.id),
                    cfg.k_intra,
                    cfg.k_cross,
                    &alpha,
                ));
            }
        }
        let candidates: Vec<BatchCandidate> = samples
            .iter()
            .map(|s| BatchCandidate {
                id: &s.record.id,
                label: s.record.label,
                features: [&s.record.visual, &s.record.textual, &s.record.audio],
            })
            .collect();
        for (s, ctx) in samples.iter().zip(&contexts) {
            negatives.push(mine_hard_negatives(ctx, s.record.label, bank, &candidates, cfg.hard_negatives));
        }
    }

    let parsed = parsed_views(&mut tape, &vars, cfg, parsing)?;
    let probs = head(&mut tape, &vars, cfg, raw, parsing, parsed)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.record.label.as_f64()).collect();
    let cls = bce_on_tape(&mut tape, probs, &labels)?;
    let cls_value = tape.value(cls).item();
    let probs_value = tape.value(probs).data().to_vec();

    let (loss, align) = if lambda > 0.0 {
        let anchors = match parsed {
            Some(p) => p,
            None => {
                let mut v = Vec::with_capacity(3);
                for m in Modality::ALL {
                    v.push(parsing_on_tape(&mut tape, &vars, m, parsing[m.index()])?);
                }
                [v[0], v[1], v[2]]
            }
        };
        let a = align_loss_on_tape(&mut tape, &vars, anchors, raw, &negatives, cfg.tau)?;
        let a_value = tape.value(a).item();
        let weighted = tape.scale(a, lambda)?;
        (tape.add(cls, weighted)?, Some(a_value))
    } else {
        (cls, None)
    };

    Ok(BatchLoss {
        tape,
        loss,
        cls: cls_value,
        align,
        probs: probs_value,
        contexts,
        negatives,
    })
}
