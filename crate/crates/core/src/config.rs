//! Run configuration shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureDims, SplitRatios};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Stub,
    Http,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(Backend::Stub),
            "http" => Ok(Backend::Http),
            _ => Err(format!("expected `stub` or `http`, got `{s}`")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Stub => "stub",
            Backend::Http => "http",
        })
    }
}

/// Model variants used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoRetrieval,
    NoDomainGuide,
    NoReasoning,
    NoDecoupling,
    NoAlignment,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoRetrieval,
        Variant::NoDomainGuide,
        Variant::NoReasoning,
        Variant::NoDecoupling,
        Variant::NoAlignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRetrieval => "no-retrieval",
            Variant::NoDomainGuide => "no-domain-guide",
            Variant::NoReasoning => "no-reasoning",
            Variant::NoDecoupling => "no-decoupling",
            Variant::NoAlignment => "no-alignment",
        }
    }

    /// Table-style label, e.g. `w/o Retrieval`.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Full => "RASR (full)",
            Variant::NoRetrieval => "w/o Retrieval",
            Variant::NoDomainGuide => "w/o Domain Guide",
            Variant::NoReasoning => "w/o MLLM Reasoning",
            Variant::NoDecoupling => "w/o Decoupling Fusion",
            Variant::NoAlignment => "w/o Alignment",
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            Variant::Full,
            Variant::NoRetrieval,
            Variant::NoDomainGuide,
            Variant::NoReasoning,
            Variant::NoDecoupling,
            Variant::NoAlignment,
        ];
        all.into_iter()
            .find(|v| v.as_str() == s || v.display_name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown variant `{s}`; expected one of {}",
                    all.map(|v| v.as_str()).join(", ")
                )
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every tunable of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lambda: f64,
    /// Reserved; no loss term consumes it.
    pub lambda2: f64,
    pub tau: f64,
    pub theta: f64,
    pub r_max: usize,
    pub k_intra: usize,
    pub k_cross: usize,
    pub hard_negatives: usize,
    pub alpha_v: f64,
    pub alpha_t: f64,
    pub alpha_a: f64,
    pub d_v: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub d_p: usize,
    pub d_h: usize,
    pub d_align: usize,
    pub d_attn: usize,
    pub d_c: usize,
    pub tokens: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub variant: Variant,
    pub reasoning_backend: Backend,
    pub embed_backend: Backend,
    pub chat_model: String,
    pub embed_model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub concurrency: usize,
    pub reference_chars: usize,
    pub http_timeout_secs: f64,
    pub http_backoff_secs: f64,
    pub audit_log: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 2e-5,
            min_lr: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            warmup_epochs: 5,
            lambda: 0.1,
            lambda2: 0.05,
            tau: 0.07,
            theta: 0.75,
            r_max: 2,
            k_intra: 4,
            k_cross: 4,
            hard_negatives: 4,
            alpha_v: 0.0,
            alpha_t: 0.0,
            alpha_a: 0.0,
            d_v: 768,
            d_t: 768,
            d_a: 128,
            d_s: 512,
            d_p: 384,
            d_h: 512,
            d_align: 256,
            d_attn: 256,
            d_c: 256,
            tokens: 8,
            split_train: 0.7,
            split_val: 0.15,
            split_test: 0.15,
            variant: Variant::Full,
            reasoning_backend: Backend::Stub,
            embed_backend: Backend::Stub,
            chat_model: "default".into(),
            embed_model: "default".into(),
            temperature: 0.2,
            top_p: 0.9,
            max_tokens: 256,
            concurrency: 4,
            reference_chars: 160,
            http_timeout_secs: 60.0,
            http_backoff_secs: 1.0,
            audit_log: String::new(),
        }
    }
}

impl TrainConfig {
    /// Small dimensions for synthetic corpora.
    ///
    /// The learning rate is raised because every weight here trains from
    /// scratch on a few thousand records; 2e-5 barely moves in 50 epochs.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            warmup_epochs: 3,
            d_v: 32,
            d_t: 32,
            d_a: 16,
            d_s: 32,
            d_p: 64,
            d_h: 32,
            d_align: 32,
            d_attn: 16,
            d_c: 16,
            tokens: 4,
            ..Self::default()
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            visual: self.d_v,
            text: self.d_t,
            audio: self.d_a,
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn alpha_logits(&self) -> [f64; 3] {
        [self.alpha_v, self.alpha_t, self.alpha_a]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("d_s", self.d_s),
            ("d_p", self.d_p),
            ("d_h", self.d_h),
            ("d_align", self.d_align),
            ("d_attn", self.d_attn),
            ("d_c", self.d_c),
            ("tokens", self.tokens),
            ("concurrency", self.concurrency),
            ("max_tokens", self.max_tokens),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{k} must be positive")));
            }
        }
        for (k, d) in [("d_v", self.d_v), ("d_t", self.d_t), ("d_a", self.d_a)] {
            if d % self.tokens != 0 {
                return Err(ConfigError::Invalid(format!(
                    "{k} = {d} is not divisible by tokens = {}",
                    self.tokens
                )));
            }
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(ConfigError::Invalid("need lr > 0 and 0 <= min_lr <= lr".into()));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 || self.lambda2 < 0.0 {
            return Err(ConfigError::Invalid("weight_decay and lambda must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ConfigError::Invalid("tau must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(ConfigError::Invalid("theta must lie in [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(ConfigError::Invalid("need 0 <= beta < 1 and adam_eps > 0".into()));
        }
        self.split_ratios()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut obj = serde_json::to_value(&*self).expect("config serializes");
        let map = obj.as_object_mut().expect("config is an object");
        let current = map
            .get(key)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        let new = match current {
            serde_json::Value::String(_) => serde_json::Value::String(value.to_string()),
            serde_json::Value::Number(n) if n.is_u64() => {
                serde_json::Value::from(value.parse::<u64>().map_err(|e| bad(e.to_string()))?)
            }
            serde_json::Value::Number(_) => {
                let v = value.parse::<f64>().map_err(|e| bad(e.to_string()))?;
                serde_json::Number::from_f64(v)
                    .map(serde_json::Value::Number)
                    .ok_or_else(|| bad("not finite".into()))?
            }
            other => return Err(bad(format!("unsupported field type {other}"))),
        };
        map.insert(key.to_string(), new);
        *self = serde_json::from_value(obj).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Parses a flat `key = value` file on top of `base`. `#` starts a comment.
    pub fn parse_flat(text: &str, base: TrainConfig) -> Result<Self, ConfigError> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Renders the config in the flat file format, one key per line.
    pub fn to_flat(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in v.as_object().expect("object") {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {s}\n"));
        }
        out
    }

    /// JSON with keys sorted, so equal configs give equal bytes.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let sorted: std::collections::BTreeMap<&String, &serde_json::Value> =
            v.as_object().expect("object").iter().collect();
        serde_json::to_string(&sorted).expect("value serializes")
    }

    pub fn from_canonical_json(s: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
