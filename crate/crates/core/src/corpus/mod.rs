//! Records, the JSONL feature-file format, split protocols and the synthetic generator.

mod domain;
mod record;
mod split;
mod synth;

pub use domain::{Domain, Label, Modality};
pub use record::{
    load_corpus, parse_corpus, read_corpus_str, save_corpus, to_jsonl, validate_records, FeatureDims,
    ModalityReports, StoredReport, VideoRecord,
};
pub use split::{lodo_split, split, SplitRatios};
pub use synth::{synth_generate, SynthConfig, FABRICATED_MARKER, VERIFIED_MARKER};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: field `{field}` has length {actual}, expected {expected}")]
    Dimension {
        line: usize,
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("line {line}: field `{field}` holds a non-finite value")]
    NonFinite { line: usize, field: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("target domain {0} has no records")]
    DomainAbsent(Domain),
    #[error("no records outside target domain {0}")]
    NoSourceDomain(Domain),
    #[error("synthetic corpus needs n >= 18, got {0}")]
    TooSmall(usize),
    #[error("invalid synthetic setting: {0}")]
    BadSynthSetting(String),
}
