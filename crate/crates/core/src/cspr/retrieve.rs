use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{CsprError, MemoryBank, SemanticPrimitive};
use crate::corpus::{Domain, Label, Modality};
use crate::numerics::{cosine, dot, softmax};

/// Modality weights for the aggregate similarity, kept as logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaWeights {
    logits: [f64; 3],
}

impl Default for AlphaWeights {
    fn default() -> Self {
        Self::from_logits([0.0; 3])
    }
}

impl AlphaWeights {
    pub fn from_logits(logits: [f64; 3]) -> Self {
        Self { logits }
    }

    /// Weights used as given (positive, summing to one); bypasses the softmax.
    pub fn explicit(weights: [f64; 3]) -> Self {
        Self {
            logits: weights.map(|w| w.ln()),
        }
    }

    pub fn logits(&self) -> [f64; 3] {
        self.logits
    }

    /// Softmax of the logits, ordered (visual, text, audio).
    pub fn weights(&self) -> [f64; 3] {
        let w = softmax(&self.logits);
        [w[0], w[1], w[2]]
    }
}

/// Weighted sum of per-modality cosines between two primitives.
pub fn aggregate_similarity(
    p: &SemanticPrimitive,
    q: &SemanticPrimitive,
    alpha: &AlphaWeights,
) -> Result<f64, CsprError> {
    let w = alpha.weights();
    let mut score = 0.0;
    for m in Modality::ALL {
        let c = cosine(p.component(m), q.component(m)).map_err(CsprError::Numerics)?;
        score += w[m.index()] * c;
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Intra,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub domain: Domain,
    pub scope: Scope,
    /// Position of the entry in the bank it was retrieved from.
    #[serde(skip)]
    pub entry: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub items: Vec<ContextItem>,
    pub intra_count: usize,
    pub cross_count: usize,
}

impl RetrievedContext {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Restores item order after edits: score descending, then id ascending.
    pub fn sort(&mut self) {
        self.items.sort_by(|a, b| rank(a.score, &a.id, b.score, &b.id));
        self.intra_count = self.items.iter().filter(|i| i.scope == Scope::Intra).count();
        self.cross_count = self.items.len() - self.intra_count;
    }
}

fn rank(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Unit-normalized primitive components; zero vectors stay zero.
pub(crate) fn unit_components(p: &SemanticPrimitive) -> [Vec<f64>; 3] {
    Modality::ALL.map(|m| {
        let c = p.component(m);
        let n = dot(c, c).sqrt();
        if n == 0.0 {
            log::warn!("zero-norm primitive component; its similarity contributes 0");
            vec![0.0; c.len()]
        } else {
            c.iter().map(|x| x / n).collect()
        }
    })
}

fn top_k(bank: &MemoryBank, candidates: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let mut c = candidates;
    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank(a.0, &bank.entries()[a.1].id, b.0, &bank.entries()[b.1].id);
    if k == 0 {
        return Vec::new();
    }
    if c.len() > k {
        c.select_nth_unstable_by(k - 1, cmp);
        c.truncate(k);
    }
    c.sort_by(cmp);
    c
}

/// Exact top-`k_intra` from the query's domain and top-`k_cross` from the
/// rest of the bank, excluding `query_id`. A short partition is returned
/// whole without borrowing from the other.
pub fn retrieve(
    bank: &MemoryBank,
    query: &SemanticPrimitive,
    query_domain: Domain,
    query_id: Option<&str>,
    k_intra: usize,
    k_cross: usize,
    alpha: &AlphaWeights,
) -> RetrievedContext {
    if k_intra == 0 && k_cross == 0 {
        return RetrievedContext::empty();
    }
    let w = alpha.weights();
    let qu = unit_components(query);
    let mut intra = Vec::new();
    let mut cross = Vec::new();
    for (i, e) in bank.entries().iter().enumerate() {
        if query_id == Some(e.id.as_str()) {
            continue;
        }
        let u = bank.unit(i);
        let mut score = 0.0;
        for m in 0..3 {
            score += w[m] * dot(&qu[m], &u[m]);
        }
        if e.domain == query_domain {
            intra.push((score, i));
        } else {
            cross.push((score, i));
        }
    }
    let mut items = Vec::with_capacity(k_intra + k_cross);
    for (scope, picked) in [
        (Scope::Intra, top_k(bank, intra, k_intra)),
        (Scope::Cross, top_k(bank, cross, k_cross)),
    ] {
        for (score, i) in picked {
            let e = &bank.entries()[i];
            items.push(ContextItem {
                id: e.id.clone(),
                score,
                label: e.label,
                domain: e.domain,
                scope,
                entry: i,
            });
        }
    }
    let mut ctx = RetrievedContext {
        items,
        intra_count: 0,
        cross_count: 0,
    };
    ctx.sort();
    ctx
}
