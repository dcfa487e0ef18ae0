use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{CorpusError, Domain, Label, Modality};

/// Expected feature lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct FeatureDims {
    pub visual: usize,
    pub text: usize,
    pub audio: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            visual: 768,
            text: 768,
            audio: 128,
        }
    }
}

impl FeatureDims {
    pub fn synthetic() -> Self {
        Self {
            visual: 32,
            text: 32,
            audio: 16,
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual,
            Modality::Text => self.text,
            Modality::Audio => self.audio,
        }
    }
}

/// A pre-generated report carried in the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct StoredReport {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, serde::Deserialize)]
pub struct ModalityReports {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<StoredReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<StoredReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<StoredReport>,
}

impl ModalityReports {
    pub fn get(&self, m: Modality) -> Option<&StoredReport> {
        match m {
            Modality::Visual => self.v.as_ref(),
            Modality::Text => self.t.as_ref(),
            Modality::Audio => self.a.as_ref(),
        }
    }

    pub fn set(&mut self, m: Modality, r: StoredReport) {
        match m {
            Modality::Visual => self.v = Some(r),
            Modality::Text => self.t = Some(r),
            Modality::Audio => self.a = Some(r),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.v.is_some() && self.t.is_some() && self.a.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub domain: Domain,
    pub label: Label,
    pub text: String,
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
    pub audio: Vec<f64>,
    pub reports: Option<ModalityReports>,
}

impl VideoRecord {
    pub fn feature(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.textual,
            Modality::Audio => &self.audio,
        }
    }

    /// Checks lengths and finiteness; `line` is used for error messages.
    pub fn validate(&self, dims: &FeatureDims, line: usize) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(schema(line, "id", "must be a nonempty string"));
        }
        for (m, field) in Modality::ALL.into_iter().zip(["features.visual", "features.text", "features.audio"]) {
            let f = self.feature(m);
            if f.len() != dims.get(m) {
                return Err(CorpusError::Dimension {
                    line,
                    field: field.to_string(),
                    expected: dims.get(m),
                    actual: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::NonFinite {
                    line,
                    field: field.to_string(),
                });
            }
        }
        if let Some(r) = &self.reports {
            for m in Modality::ALL {
                if let Some(rep) = r.get(m) {
                    if !rep.confidence.is_finite() || !(-1.0..=1.0).contains(&rep.confidence) {
                        return Err(schema(
                            line,
                            &format!("reports.{}.confidence", m.key()),
                            "must be a finite number in [-1, 1]",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn schema(line: usize, field: &str, message: &str) -> CorpusError {
    CorpusError::Schema {
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn take_field<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a Value, CorpusError> {
    obj.get(field).ok_or_else(|| schema(line, field, "missing"))
}

fn as_string(v: &Value, line: usize, field: &str) -> Result<String, CorpusError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(line, field, "expected a string"))
}

fn as_vector(v: &Value, line: usize, field: &str) -> Result<Vec<f64>, CorpusError> {
    let arr = v.as_array().ok_or_else(|| schema(line, field, "expected an array of numbers"))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| schema(line, field, "expected an array of numbers")))
        .collect()
}

fn parse_record(v: &Value, line: usize) -> Result<VideoRecord, CorpusError> {
    let obj = v.as_object().ok_or_else(|| schema(line, "<root>", "expected a JSON object"))?;
    let id = as_string(take_field(obj, line, "id")?, line, "id")?;
    let domain_str = as_string(take_field(obj, line, "domain")?, line, "domain")?;
    let domain = domain_str
        .parse::<Domain>()
        .map_err(|e| schema(line, "domain", &e.to_string()))?;
    let label = take_field(obj, line, "label")?
        .as_u64()
        .and_then(|x| u8::try_from(x).ok())
        .and_then(Label::from_u8)
        .ok_or_else(|| schema(line, "label", "must be the integer 0 or 1"))?;
    let text = as_string(take_field(obj, line, "text")?, line, "text")?;
    let feats = take_field(obj, line, "features")?
        .as_object()
        .ok_or_else(|| schema(line, "features", "expected an object"))?;
    let get = |k: &str| -> Result<Vec<f64>, CorpusError> {
        let name = format!("features.{k}");
        as_vector(feats.get(k).ok_or_else(|| schema(line, &name, "missing"))?, line, &name)
    };
    let (visual, textual, audio) = (get("visual")?, get("text")?, get("audio")?);
    let reports = match obj.get("reports") {
        None | Some(Value::Null) => None,
        Some(r) => Some(
            serde_json::from_value::<ModalityReports>(r.clone())
                .map_err(|e| schema(line, "reports", &e.to_string()))?,
        ),
    };
    Ok(VideoRecord {
        id,
        domain,
        label,
        text,
        visual,
        textual,
        audio,
        reports,
    })
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str, dims: &FeatureDims) -> Result<Vec<VideoRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| schema(line, "<json>", &e.to_string()))?;
        let rec = parse_record(&v, line)?;
        rec.validate(dims, line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: rec.id });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus_str(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_corpus(path: &Path, dims: &FeatureDims) -> Result<Vec<VideoRecord>, CorpusError> {
    parse_corpus(&read_corpus_str(path)?, dims)
}

/// Validates an in-memory corpus: dims, finiteness and id uniqueness.
pub fn validate_records(records: &[VideoRecord], dims: &FeatureDims) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        r.validate(dims, i + 1)?;
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                line: i + 1,
                id: r.id.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FeaturesOut<'a> {
    visual: &'a [f64],
    text: &'a [f64],
    audio: &'a [f64],
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    domain: Domain,
    label: Label,
    text: &'a str,
    features: FeaturesOut<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reports: Option<&'a ModalityReports>,
}

pub fn to_jsonl(records: &[VideoRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let row = RecordOut {
            id: &r.id,
            domain: r.domain,
            label: r.label,
            text: &r.text,
            features: FeaturesOut {
                visual: &r.visual,
                text: &r.textual,
                audio: &r.audio,
            },
            reports: r.reports.as_ref(),
        };
        out.push_str(&serde_json::to_string(&row).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, records: &[VideoRecord]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)
}
