use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{DgmpError, Embedder, ReasoningClient, ReasoningRequest};
use crate::corpus::Modality;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles afterwards.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub audit_log: Option<PathBuf>,
}

impl HttpSettings {
    /// Reads the endpoint from `url_var` and the bearer token from `RASR_API_TOKEN`.
    pub fn from_env(url_var: &str, model: &str) -> Result<Self, DgmpError> {
        let url = std::env::var(url_var).map_err(|_| DgmpError::Missing(format!("environment variable {url_var}")))?;
        Ok(Self {
            url,
            model: model.to_string(),
            token: std::env::var("RASR_API_TOKEN").ok(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            audit_log: None,
        })
    }
}

struct Transport {
    settings: HttpSettings,
    agent: ureq::Agent,
    audit: Option<Mutex<File>>,
}

impl Transport {
    fn new(settings: HttpSettings) -> Result<Self, DgmpError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let audit = match &settings.audit_log {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        Ok(Self { settings, agent, audit })
    }

    fn log(&self, request: &Value, outcome: Result<&Value, &str>, attempt: usize) {
        let Some(f) = &self.audit else { return };
        let line = match outcome {
            Ok(resp) => json!({"url": self.settings.url, "attempt": attempt, "request": request, "response": resp}),
            Err(e) => json!({"url": self.settings.url, "attempt": attempt, "request": request, "error": e}),
        };
        let mut f = f.lock().expect("audit lock");
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("audit log write failed: {e}");
        }
    }

    fn once(&self, body: &Value) -> Result<Value, String> {
        let mut req = self.agent.post(&self.settings.url).header("Content-Type", "application/json");
        if let Some(t) = &self.settings.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !(200..300).contains(&status) {
            return Err(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()));
        }
        serde_json::from_str(&text).map_err(|e| format!("invalid JSON body: {e}"))
    }

    /// POSTs `body`, retrying transport failures and non-2xx statuses.
    fn post(&self, body: &Value) -> Result<Value, DgmpError> {
        let mut delay = self.settings.retry.base_delay;
        let attempts = self.settings.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.once(body) {
                Ok(v) => {
                    self.log(body, Ok(&v), attempt);
                    return Ok(v);
                }
                Err(e) => {
                    log::warn!("request to {} failed (attempt {attempt}/{attempts}): {e}", self.settings.url);
                    self.log(body, Err(&e), attempt);
                    last = e;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(DgmpError::Backend {
            attempts,
            message: last,
        })
    }
}

/// Chat-completions backend.
pub struct HttpChatClient {
    transport: Transport,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl HttpChatClient {
    pub fn new(settings: HttpSettings, temperature: f64, top_p: f64, max_tokens: usize) -> Result<Self, DgmpError> {
        Ok(Self {
            transport: Transport::new(settings)?,
            temperature,
            top_p,
            max_tokens,
        })
    }

    pub fn request_body(&self, req: &ReasoningRequest) -> Value {
        let role = match req.modality {
            Modality::Visual => "video frames",
            Modality::Text => "video text",
            Modality::Audio => "video audio",
        };
        let user = format!(
            "{}\n\nContent under review:\n{}\nFeature summary: {}",
            req.prompt, req.content, req.feature_digest
        );
        json!({
            "model": self.transport.settings.model,
            "messages": [
                {"role": "system", "content": format!("You are a fact-checking analyst for {role}.")},
                {"role": "user", "content": user},
            ],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        })
    }
}

impl ReasoningClient for HttpChatClient {
    fn generate(&self, req: &ReasoningRequest) -> Result<String, DgmpError> {
        let resp = self.transport.post(&self.request_body(req))?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| DgmpError::BadResponse("missing choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(DgmpError::EmptyCompletion);
        }
        Ok(content.to_string())
    }
}

/// Embeddings backend; outputs are L2-normalized.
pub struct HttpEmbedder {
    transport: Transport,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, dim: usize) -> Result<Self, DgmpError> {
        Ok(Self {
            transport: Transport::new(settings)?,
            dim,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, DgmpError> {
        if text.trim().is_empty() {
            return Err(DgmpError::EmptyText);
        }
        let body = json!({"model": self.transport.settings.model, "input": [text]});
        let resp = self.transport.post(&body)?;
        let arr = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| DgmpError::BadResponse("missing data[0].embedding".into()))?;
        let v: Vec<f64> = arr
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| DgmpError::BadResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if v.len() != self.dim {
            return Err(DgmpError::EmbeddingDim {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DgmpError::BadResponse("non-finite embedding".into()));
        }
        Ok(crate::numerics::l2_normalize(&v))
    }
}
