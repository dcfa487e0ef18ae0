use std::sync::Arc;

use rayon::prelude::*;

use super::{gate_report, AnalysisReport, DgmpError, Embedder, GateInputs, ReasoningClient};
use crate::corpus::{Modality, VideoRecord};

/// One report to generate.
#[derive(Debug, Clone)]
pub struct ReportJob<'a> {
    pub record: &'a VideoRecord,
    pub modality: Modality,
    pub prompt: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    /// Same order as the submitted jobs.
    pub reports: Vec<AnalysisReport>,
    pub failures: usize,
}

/// Runs gated report generation over many jobs with bounded concurrency.
pub struct ReportEngine {
    client: Arc<dyn ReasoningClient>,
    embedder: Arc<dyn Embedder>,
    pool: rayon::ThreadPool,
    pub theta: f64,
    pub r_max: usize,
}

impl ReportEngine {
    pub fn new(
        client: Arc<dyn ReasoningClient>,
        embedder: Arc<dyn Embedder>,
        theta: f64,
        r_max: usize,
        concurrency: usize,
    ) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
            .expect("report thread pool");
        Self {
            client,
            embedder,
            pool,
            theta,
            r_max,
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn run_one(&self, job: &ReportJob<'_>) -> Result<AnalysisReport, DgmpError> {
        let inputs = GateInputs {
            record: job.record,
            modality: job.modality,
            prompt: &job.prompt,
            references: job.references.iter().map(String::as_str).collect(),
        };
        gate_report(self.client.as_ref(), self.embedder.as_ref(), &inputs, self.theta, self.r_max)
    }

    /// Failed jobs become sentinel reports. Errors only if every job failed.
    pub fn run(&self, jobs: &[ReportJob<'_>]) -> Result<ReportOutcome, DgmpError> {
        let results: Vec<Result<AnalysisReport, DgmpError>> =
            self.pool.install(|| jobs.par_iter().map(|j| self.run_one(j)).collect());
        let mut failures = 0;
        let mut first_err = None;
        let mut reports = Vec::with_capacity(jobs.len());
        for (job, r) in jobs.iter().zip(results) {
            match r {
                Ok(rep) => reports.push(rep),
                Err(e) => {
                    log::warn!("report for {} ({}) failed: {e}", job.record.id, job.modality.key());
                    failures += 1;
                    reports.push(AnalysisReport::sentinel(job.modality, self.embedder.dim(), self.r_max + 1));
                    first_err.get_or_insert(e);
                }
            }
        }
        if !jobs.is_empty() && failures == jobs.len() {
            return Err(first_err.expect("a failure"));
        }
        Ok(ReportOutcome { reports, failures })
    }
}
