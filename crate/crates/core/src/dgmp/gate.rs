use serde::{Deserialize, Serialize};

use super::{DgmpError, Embedder, ReasoningClient, ReasoningRequest};
use crate::corpus::{Modality, VideoRecord};
use crate::numerics::cosine;

/// A gated report for one record and modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub modality: Modality,
    pub text: String,
    pub confidence: f64,
    pub low_confidence: bool,
    pub attempts: usize,
    pub parsing_feature: Vec<f64>,
}

impl AnalysisReport {
    /// Placeholder for a sample whose backend calls all failed.
    pub fn sentinel(modality: Modality, dim: usize, attempts: usize) -> Self {
        Self {
            modality,
            text: String::new(),
            confidence: -1.0,
            low_confidence: true,
            attempts,
            parsing_feature: vec![0.0; dim],
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.text.is_empty()
    }
}

/// Mean cosine of `report` against each reference embedding; 1.0 with none.
pub fn mean_cosine(report: &[f64], references: &[Vec<f64>]) -> f64 {
    if references.is_empty() {
        return 1.0;
    }
    let mut s = 0.0;
    for r in references {
        s += cosine(report, r).unwrap_or(0.0);
    }
    (s / references.len() as f64).clamp(-1.0, 1.0)
}

/// Confidence of `report_text` against the stored reference reports.
pub fn compute_confidence(report_text: &str, references: &[&str], embedder: &dyn Embedder) -> Result<f64, DgmpError> {
    let e = embedder.embed(report_text)?;
    let refs = references
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_cosine(&e, &refs))
}

pub struct GateInputs<'a> {
    pub record: &'a VideoRecord,
    pub modality: Modality,
    pub prompt: &'a str,
    /// Stored reports of the retrieved samples for this modality.
    pub references: Vec<&'a str>,
}

fn feature_digest(f: &[f64]) -> String {
    let n = f.len().max(1) as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    format!("dim={} mean={:.4} std={:.4}", f.len(), mean, var.sqrt())
}

/// Generates, scores and (if needed) regenerates a report.
///
/// At most `r_max + 1` attempts; stops at the first with confidence >= `theta`
/// and otherwise keeps the best (earliest on ties). A final confidence below
/// `theta` sets the flag and scales the parsing feature by `conf / theta`
/// clamped to [0, 1].
pub fn gate_report(
    client: &dyn ReasoningClient,
    embedder: &dyn Embedder,
    inputs: &GateInputs<'_>,
    theta: f64,
    r_max: usize,
) -> Result<AnalysisReport, DgmpError> {
    let refs = inputs
        .references
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut req = ReasoningRequest {
        modality: inputs.modality,
        prompt: inputs.prompt.to_string(),
        content: inputs.record.text.clone(),
        feature_digest: feature_digest(inputs.record.feature(inputs.modality)),
        attempt: 0,
    };
    let mut best: Option<(f64, String, Vec<f64>)> = None;
    let mut attempts = 0;
    for attempt in 0..=r_max {
        req.attempt = attempt;
        attempts += 1;
        let text = client.generate(&req)?;
        if text.trim().is_empty() {
            return Err(DgmpError::EmptyCompletion);
        }
        let emb = embedder.embed(&text)?;
        let conf = mean_cosine(&emb, &refs);
        if best.as_ref().is_none_or(|b| conf > b.0) {
            best = Some((conf, text, emb));
        }
        if conf >= theta {
            break;
        }
    }
    let (confidence, text, mut feature) = best.expect("at least one attempt");
    let low_confidence = confidence < theta;
    if low_confidence {
        let scale = (confidence / theta).clamp(0.0, 1.0);
        for v in &mut feature {
            *v *= scale;
        }
    }
    Ok(AnalysisReport {
        modality: inputs.modality,
        text,
        confidence,
        low_confidence,
        attempts,
        parsing_feature: feature,
    })
}
