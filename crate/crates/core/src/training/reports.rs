use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use super::{uses_reasoning, TrainError};
use crate::config::{Backend, TrainConfig, Variant};
use crate::corpus::{Modality, ModalityReports, StoredReport, VideoRecord};
use crate::cspr::{parse_batch, retrieve, AlphaWeights, MemoryBank, RetrievedContext, SemanticPrimitive};
use crate::dgmp::{
    build_prompt, references_from, AnalysisReport, DgmpError, Embedder, HttpChatClient, HttpEmbedder, HttpSettings,
    ReasoningClient, ReportEngine, ReportJob, RetryPolicy, StubClient, StubEmbedder,
};

/// Reasoning client and report embedder for a run.
#[derive(Clone)]
pub struct Backends {
    pub client: Arc<dyn ReasoningClient>,
    pub embedder: Arc<dyn Embedder>,
}

impl Backends {
    /// Deterministic offline backends seeded from the config.
    pub fn stub(cfg: &TrainConfig) -> Self {
        Self {
            client: Arc::new(StubClient::new(cfg.seed)),
            embedder: Arc::new(StubEmbedder::new(cfg.d_p, cfg.seed)),
        }
    }

    /// Backends selected by `reasoning_backend` / `embed_backend`. HTTP
    /// endpoints come from `RASR_CHAT_URL` and `RASR_EMBED_URL`.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let stub = Self::stub(cfg);
        let settings = |var: &str, model: &str| -> Result<HttpSettings, DgmpError> {
            let mut s = HttpSettings::from_env(var, model)?;
            s.timeout = Duration::from_secs_f64(cfg.http_timeout_secs);
            s.retry = RetryPolicy {
                attempts: 3,
                base_delay: Duration::from_secs_f64(cfg.http_backoff_secs),
            };
            s.audit_log = (!cfg.audit_log.is_empty()).then(|| PathBuf::from(&cfg.audit_log));
            Ok(s)
        };
        let client: Arc<dyn ReasoningClient> = match cfg.reasoning_backend {
            Backend::Stub => stub.client,
            Backend::Http => Arc::new(HttpChatClient::new(
                settings("RASR_CHAT_URL", &cfg.chat_model)?,
                cfg.temperature,
                cfg.top_p,
                cfg.max_tokens,
            )?),
        };
        let embedder: Arc<dyn Embedder> = match cfg.embed_backend {
            Backend::Stub => stub.embedder,
            Backend::Http => Arc::new(HttpEmbedder::new(settings("RASR_EMBED_URL", &cfg.embed_model)?, cfg.d_p)?),
        };
        Ok(Self { client, embedder })
    }

    pub fn engine(&self, cfg: &TrainConfig) -> Result<ReportEngine, TrainError> {
        if self.embedder.dim() != cfg.d_p {
            return Err(TrainError::InvalidValue(format!(
                "embedder dimension {} does not match d_p = {}",
                self.embedder.dim(),
                cfg.d_p
            )));
        }
        Ok(ReportEngine::new(
            self.client.clone(),
            self.embedder.clone(),
            cfg.theta,
            cfg.r_max,
            cfg.concurrency,
        ))
    }
}

/// Reports for one record, ordered (visual, text, audio).
pub type SampleReports = [AnalysisReport; 3];

/// Reports and parsing features for a list of records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBook {
    /// `None` when the variant has no reasoning stage.
    pub reports: Vec<Option<SampleReports>>,
    pub parsing: Vec<[Vec<f64>; 3]>,
    pub failures: usize,
}

impl ReportBook {
    fn zeros(n: usize, d_p: usize) -> Self {
        Self {
            reports: vec![None; n],
            parsing: vec![[vec![0.0; d_p], vec![0.0; d_p], vec![0.0; d_p]]; n],
            failures: 0,
        }
    }

    /// Reports in the corpus storage form; failed reports are left out.
    pub fn stored(&self) -> Vec<Option<ModalityReports>> {
        self.reports
            .iter()
            .map(|r| {
                r.as_ref().map(|rs| {
                    let mut out = ModalityReports::default();
                    for rep in rs.iter().filter(|r| !r.is_sentinel()) {
                        out.set(
                            rep.modality,
                            StoredReport {
                                text: rep.text.clone(),
                                confidence: rep.confidence,
                            },
                        );
                    }
                    out
                })
            })
            .collect()
    }
}

/// Primitives of `records` and their retrieved contexts from `bank`
/// (self-excluded). Contexts are empty for the no-retrieval variant.
pub fn contexts_for(
    params: &crate::numerics::ParamStore,
    cfg: &TrainConfig,
    bank: &MemoryBank,
    records: &[&VideoRecord],
) -> Result<(Vec<SemanticPrimitive>, Vec<RetrievedContext>), TrainError> {
    let prims = parse_batch(params, cfg, records)?;
    if cfg.variant == Variant::NoRetrieval {
        return Ok((prims, vec![RetrievedContext::empty(); records.len()]));
    }
    let alpha = AlphaWeights::from_logits(cfg.alpha_logits());
    let ctx = records
        .iter()
        .zip(&prims)
        .map(|(r, p)| retrieve(bank, p, r.domain, Some(&r.id), cfg.k_intra, cfg.k_cross, &alpha))
        .collect();
    Ok((prims, ctx))
}

fn from_stored(
    embedder: &dyn Embedder,
    m: Modality,
    stored: &StoredReport,
    theta: f64,
) -> Result<AnalysisReport, TrainError> {
    let mut feature = embedder.embed(&stored.text)?;
    let low = stored.confidence < theta;
    if low {
        let scale = (stored.confidence / theta).clamp(0.0, 1.0);
        feature.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(AnalysisReport {
        modality: m,
        text: stored.text.clone(),
        confidence: stored.confidence,
        low_confidence: low,
        attempts: 1,
        parsing_feature: feature,
    })
}

/// Generates (or reuses stored) reports for `records`.
///
/// With `gated`, each report is checked against the stored reports of its
/// context items; otherwise it is accepted as generated.
pub fn build_reports(
    engine: &ReportEngine,
    cfg: &TrainConfig,
    bank: &MemoryBank,
    records: &[&VideoRecord],
    contexts: &[RetrievedContext],
    gated: bool,
) -> Result<ReportBook, TrainError> {
    if !uses_reasoning(cfg) {
        return Ok(ReportBook::zeros(records.len(), cfg.d_p));
    }
    let domain_guided = cfg.variant != Variant::NoDomainGuide;
    let mut jobs = Vec::new();
    let mut owners = Vec::new();
    for (i, (r, ctx)) in records.iter().zip(contexts).enumerate() {
        if r.reports.as_ref().is_some_and(ModalityReports::is_complete) {
            continue;
        }
        let refs = references_from(ctx, bank);
        for m in Modality::ALL {
            let prompt = build_prompt(m, domain_guided.then_some(r.domain), &refs, cfg.reference_chars);
            let references = if gated {
                ctx.items
                    .iter()
                    .filter_map(|it| bank.entries()[it.entry].reports.as_ref()?.get(m))
                    .map(|s| s.text.clone())
                    .filter(|t| !t.trim().is_empty())
                    .collect()
            } else {
                Vec::new()
            };
            jobs.push(ReportJob {
                record: r,
                modality: m,
                prompt,
                references,
            });
        }
        owners.push(i);
    }
    let outcome = if jobs.is_empty() {
        None
    } else {
        Some(engine.run(&jobs)?)
    };
    let mut generated = outcome.as_ref().map(|o| o.reports.chunks(3)).into_iter().flatten();
    let mut reports = Vec::with_capacity(records.len());
    let mut next_owner = owners.iter().peekable();
    for (i, r) in records.iter().enumerate() {
        let rs: SampleReports = if next_owner.peek() == Some(&&i) {
            next_owner.next();
            let c = generated.next().expect("one chunk per generated record");
            [c[0].clone(), c[1].clone(), c[2].clone()]
        } else {
            let stored = r.reports.as_ref().expect("complete stored reports");
            let mut v = Vec::with_capacity(3);
            for m in Modality::ALL {
                v.push(from_stored(engine.embedder(), m, stored.get(m).expect("complete"), cfg.theta)?);
            }
            [v[0].clone(), v[1].clone(), v[2].clone()]
        };
        reports.push(rs);
    }
    let parsing = reports
        .iter()
        .map(|rs| rs.clone().map(|r| r.parsing_feature))
        .collect();
    Ok(ReportBook {
        reports: reports.into_iter().map(Some).collect(),
        parsing,
        failures: outcome.map(|o| o.failures).unwrap_or(0),
    })
}
