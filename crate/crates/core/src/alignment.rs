//! Shared-manifold projection heads and the contrastive alignment loss with
//! hard negatives taken from the retrieved context.

use crate::config::TrainConfig;
use crate::corpus::{Label, Modality};
use crate::cspr::{MemoryBank, RetrievedContext};
use crate::nn::{linear_specs, ParamSpec};
use crate::numerics::{cosine, dot, l2_normalize, NumericsError, ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Raw modality feature, `d_m -> d_align`.
    Raw,
    /// Report embedding, `d_p -> d_align`.
    Parsing,
}

pub fn head_prefix(m: Modality, head: Head) -> String {
    match head {
        Head::Raw => format!("align.raw_{}", m.key()),
        Head::Parsing => format!("align.parse_{}", m.key()),
    }
}

fn modality_dim(cfg: &TrainConfig, m: Modality) -> usize {
    cfg.feature_dims().get(m)
}

pub fn param_specs(cfg: &TrainConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for m in Modality::ALL {
        v.extend(linear_specs(&head_prefix(m, Head::Raw), modality_dim(cfg, m), cfg.d_align, false));
        v.extend(linear_specs(&head_prefix(m, Head::Parsing), cfg.d_p, cfg.d_align, false));
    }
    v
}

/// Linear head followed by L2 normalization.
pub fn project(
    params: &ParamStore,
    cfg: &TrainConfig,
    m: Modality,
    head: Head,
    x: &[f64],
) -> Result<Vec<f64>, AlignError> {
    let input = match head {
        Head::Raw => modality_dim(cfg, m),
        Head::Parsing => cfg.d_p,
    };
    if x.len() != input {
        return Err(AlignError::Dimension {
            what: "projection input",
            expected: input,
            actual: x.len(),
        });
    }
    let w = params.get(&format!("{}.w", head_prefix(m, head)))?;
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    Ok(l2_normalize(&out))
}

/// One opposite-label sample used as a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeMember {
    pub id: String,
    pub label: Label,
    /// Retrieval score; `None` for batch fallbacks.
    pub score: Option<f64>,
    /// Raw visual, text and audio features.
    pub features: [Vec<f64>; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub members: Vec<NegativeMember>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A batch sample that can serve as a fallback negative.
#[derive(Debug, Clone, Copy)]
pub struct BatchCandidate<'a> {
    pub id: &'a str,
    pub label: Label,
    pub features: [&'a [f64]; 3],
}

/// Top-`h` opposite-label items of `ctx` by score. Falls back to opposite-label
/// batch members (in batch order) when the context has none.
pub fn mine_hard_negatives(
    ctx: &RetrievedContext,
    anchor_label: Label,
    bank: &MemoryBank,
    batch: &[BatchCandidate<'_>],
    h: usize,
) -> NegativeSet {
    let mut picked: Vec<&crate::cspr::ContextItem> = ctx.items.iter().filter(|it| it.label != anchor_label).collect();
    picked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    picked.truncate(h);
    let mut members: Vec<NegativeMember> = picked
        .into_iter()
        .map(|it| {
            let e = &bank.entries()[it.entry];
            NegativeMember {
                id: e.id.clone(),
                label: e.label,
                score: Some(it.score),
                features: [e.visual.clone(), e.textual.clone(), e.audio.clone()],
            }
        })
        .collect();
    if members.is_empty() {
        members = batch
            .iter()
            .filter(|c| c.label != anchor_label)
            .take(h)
            .map(|c| NegativeMember {
                id: c.id.to_string(),
                label: c.label,
                score: None,
                features: c.features.map(<[f64]>::to_vec),
            })
            .collect();
    }
    for m in &members {
        assert_ne!(m.label, anchor_label, "hard negative shares the anchor label");
    }
    NegativeSet { members }
}

/// One modality's already-projected anchor, positive and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTerm {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `-log(e^{s+/tau} / (e^{s+/tau} + sum_k e^{s-_k/tau}))` with cosine similarities.
pub fn info_nce(term: &AlignTerm, tau: f64) -> Result<f64, AlignError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(AlignError::NonPositiveTau(tau));
    }
    if term.negatives.is_empty() {
        return Ok(0.0);
    }
    let pos = cosine(&term.anchor, &term.positive)? / tau;
    let mut logits = vec![pos];
    for n in &term.negatives {
        logits.push(cosine(&term.anchor, n)? / tau);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Mean of [`info_nce`] over the given modalities.
pub fn align_loss(terms: &[AlignTerm], tau: f64) -> Result<f64, AlignError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(AlignError::NonPositiveTau(tau));
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for t in terms {
        s += info_nce(t, tau)?;
    }
    Ok(s / terms.len() as f64)
}

/// Parsing features through the parsing head, unnormalized. Shared with the
/// enhancement query.
pub fn parsing_on_tape(tape: &mut Tape, vars: &ParamVars, m: Modality, p: Var) -> Result<Var, AlignError> {
    Ok(crate::nn::linear(tape, vars, &head_prefix(m, Head::Parsing), p, false)?)
}

/// Batch alignment loss recorded on `tape`.
///
/// `parsed[m]` is the `n x d_align` parsing-head output, `raw[m]` the
/// `n x d_m` raw features and `negatives[i]` the set for sample `i`.
/// Returns the scalar mean over samples of the per-sample loss averaged
/// over the three modalities.
pub fn align_loss_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    parsed: [Var; 3],
    raw: [Var; 3],
    negatives: &[NegativeSet],
    tau: f64,
) -> Result<Var, AlignError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(AlignError::NonPositiveTau(tau));
    }
    let n = negatives.len();
    let hmax = negatives.iter().map(NegativeSet::len).max().unwrap_or(0);
    let mut per_modality = Vec::new();
    for m in Modality::ALL {
        let i = m.index();
        let anchor = tape.normalize_rows(parsed[i])?;
        let pos_raw = crate::nn::linear(tape, vars, &head_prefix(m, Head::Raw), raw[i], false)?;
        let pos = tape.normalize_rows(pos_raw)?;
        let s_pos = tape.row_dot(anchor, pos)?;
        if hmax == 0 {
            continue;
        }
        let d_m = tape.value(raw[i]).cols();
        let mut rows = vec![0.0; n * hmax * d_m];
        let mut mask = vec![false; n * (hmax + 1)];
        for (s, set) in negatives.iter().enumerate() {
            mask[s * (hmax + 1)] = true;
            for (k, mem) in set.members.iter().enumerate() {
                let f = &mem.features[i];
                if f.len() != d_m {
                    return Err(AlignError::Dimension {
                        what: "negative feature",
                        expected: d_m,
                        actual: f.len(),
                    });
                }
                let at = (s * hmax + k) * d_m;
                rows[at..at + d_m].copy_from_slice(f);
                mask[s * (hmax + 1) + 1 + k] = true;
            }
        }
        let neg = tape.constant(Tensor::new(vec![n * hmax, d_m], rows)?);
        let neg = crate::nn::linear(tape, vars, &head_prefix(m, Head::Raw), neg, false)?;
        let neg = tape.normalize_rows(neg)?;
        let s_neg = tape.group_dot(anchor, neg, hmax)?;
        let logits = tape.concat_cols(&[s_pos, s_neg])?;
        let logits = tape.scale(logits, 1.0 / tau)?;
        let lse = tape.masked_row_logsumexp(logits, mask)?;
        let s_pos_t = tape.scale(s_pos, 1.0 / tau)?;
        let term = tape.sub(lse, s_pos_t)?;
        per_modality.push(term);
    }
    if per_modality.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let mut acc = per_modality[0];
    for t in &per_modality[1..] {
        acc = tape.add(acc, *t)?;
    }
    let mean = tape.mean(acc)?;
    Ok(tape.scale(mean, 1.0 / Modality::ALL.len() as f64)?)
}

/// Cosine in the manifold between a parsing feature and a raw feature.
pub fn manifold_similarity(
    params: &ParamStore,
    cfg: &TrainConfig,
    m: Modality,
    parsing: &[f64],
    raw: &[f64],
) -> Result<f64, AlignError> {
    let a = project(params, cfg, m, Head::Parsing, parsing)?;
    let b = project(params, cfg, m, Head::Raw, raw)?;
    Ok(dot(&a, &b))
}
