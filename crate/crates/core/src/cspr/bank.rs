use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::retrieve::unit_components;
use super::{parse_batch, CsprError, SemanticPrimitive};
use crate::config::TrainConfig;
use crate::corpus::{Domain, Label, ModalityReports, VideoRecord};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: String,
    pub label: Label,
    pub domain: Domain,
    /// Record text, rendered as a digest in prompts.
    pub text: String,
    /// Raw features of the source record, used for hard negatives.
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
    pub audio: Vec<f64>,
    pub primitive: SemanticPrimitive,
    pub reports: Option<ModalityReports>,
}

/// Training-split entries partitioned by domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    domain_index: BTreeMap<Domain, Vec<usize>>,
    units: Vec<[Vec<f64>; 3]>,
}

impl MemoryBank {
    /// Indexes already-built entries.
    pub fn from_entries(entries: Vec<BankEntry>) -> Result<Self, CsprError> {
        let mut seen = HashSet::new();
        let mut domain_index: BTreeMap<Domain, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(CsprError::DuplicateId(e.id.clone()));
            }
            domain_index.entry(e.domain).or_default().push(i);
        }
        let units = entries.iter().map(|e| unit_components(&e.primitive)).collect();
        Ok(Self {
            entries,
            domain_index,
            units,
        })
    }

    /// One entry per record, with primitives under the current parameters.
    /// Reports carried by the records are kept.
    pub fn build(records: &[VideoRecord], params: &ParamStore, cfg: &TrainConfig) -> Result<Self, CsprError> {
        let refs: Vec<&VideoRecord> = records.iter().collect();
        let prims = parse_batch(params, cfg, &refs)?;
        let entries = records
            .iter()
            .zip(prims)
            .map(|(r, p)| BankEntry {
                id: r.id.clone(),
                label: r.label,
                domain: r.domain,
                text: r.text.clone(),
                visual: r.visual.clone(),
                textual: r.textual.clone(),
                audio: r.audio.clone(),
                primitive: p,
                reports: r.reports.clone(),
            })
            .collect();
        Self::from_entries(entries)
    }

    /// Recomputes every primitive under `params`; ids, labels and reports are kept.
    pub fn refresh(&self, params: &ParamStore, cfg: &TrainConfig) -> Result<Self, CsprError> {
        let records: Vec<VideoRecord> = self.entries.iter().map(BankEntry::as_record).collect();
        let refs: Vec<&VideoRecord> = records.iter().collect();
        let prims = parse_batch(params, cfg, &refs)?;
        let entries = self
            .entries
            .iter()
            .zip(prims)
            .map(|(e, p)| BankEntry {
                primitive: p,
                ..e.clone()
            })
            .collect();
        Self::from_entries(entries)
    }

    /// Same entries with stored reports replaced.
    pub fn with_reports(&self, reports: Vec<Option<ModalityReports>>) -> Self {
        assert_eq!(reports.len(), self.entries.len());
        let mut out = self.clone();
        for (e, r) in out.entries.iter_mut().zip(reports) {
            e.reports = r;
        }
        out
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domain_index(&self) -> &BTreeMap<Domain, Vec<usize>> {
        &self.domain_index
    }

    pub fn partition(&self, d: Domain) -> &[usize] {
        self.domain_index.get(&d).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, id: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub(crate) fn unit(&self, i: usize) -> &[Vec<f64>; 3] {
        &self.units[i]
    }
}

impl BankEntry {
    pub fn as_record(&self) -> VideoRecord {
        VideoRecord {
            id: self.id.clone(),
            domain: self.domain,
            label: self.label,
            text: self.text.clone(),
            visual: self.visual.clone(),
            textual: self.textual.clone(),
            audio: self.audio.clone(),
            reports: self.reports.clone(),
        }
    }

    pub fn feature(&self, m: crate::corpus::Modality) -> &[f64] {
        use crate::corpus::Modality;
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.textual,
            Modality::Audio => &self.audio,
        }
    }
}
