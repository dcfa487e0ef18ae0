use serde::{Deserialize, Serialize};

use crate::corpus::Label;

/// Counts with fake as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
    pub confusion: Confusion,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

impl Confusion {
    /// `probs[i] >= threshold` predicts fake.
    pub fn from_predictions(probs: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= threshold, y) {
                (true, Label::Fake) => c.tp += 1,
                (true, Label::Real) => c.fp += 1,
                (false, Label::Real) => c.tn += 1,
                (false, Label::Fake) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let fake = class(c.tp, c.fp, c.fn_);
        let real = class(c.tn, c.fn_, c.fp);
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            macro_f1: (fake.f1 + real.f1) / 2.0,
            real,
            fake,
            confusion: c,
        }
    }

    pub fn from_predictions(probs: &[f64], labels: &[Label]) -> Self {
        Self::from_confusion(Confusion::from_predictions(probs, labels, 0.5))
    }
}
