use std::hash::Hasher;

use fnv::FnvHasher;

use super::DgmpError;
use crate::corpus::{Modality, FABRICATED_MARKER, VERIFIED_MARKER};

/// Phrase the stub writes into every report it judges fabricated.
pub const INCONSISTENCY_PHRASE: &str = "inconsistent with the stated claim";

/// One generation call for one record and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningRequest {
    pub modality: Modality,
    pub prompt: String,
    /// Record text under review.
    pub content: String,
    /// Short numeric summary of the modality's feature vector.
    pub feature_digest: String,
    /// 0 for the first try; regenerations count up.
    pub attempt: usize,
}

pub trait ReasoningClient: Send + Sync {
    fn generate(&self, req: &ReasoningRequest) -> Result<String, DgmpError>;
}

/// Deterministic offline stand-in for a reasoning model.
///
/// Polarity comes from label markers in the record text; without one, the
/// stub follows the majority label of the references listed in the prompt
/// (same-domain references only when the prompt names a domain).
#[derive(Debug, Clone)]
pub struct StubClient {
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Polarity {
    Fabricated,
    Authentic,
    Unclear,
}

fn prompt_domain(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("Domain: "))
        .map(|d| d.trim_end_matches('.'))
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split(" | ")
        .find_map(|part| part.trim().strip_prefix(key))
        .map(str::trim)
}

fn consensus(prompt: &str) -> Polarity {
    let domain = prompt_domain(prompt);
    let (mut fake, mut real) = (0usize, 0usize);
    for line in prompt.lines().filter(|l| l.starts_with('[')) {
        let d = field(line, "domain=");
        if domain.is_some() && d != domain {
            continue;
        }
        match field(line, "label=") {
            Some("fake") => fake += 1,
            Some("real") => real += 1,
            _ => {}
        }
    }
    match fake.cmp(&real) {
        std::cmp::Ordering::Greater => Polarity::Fabricated,
        std::cmp::Ordering::Less => Polarity::Authentic,
        std::cmp::Ordering::Equal => Polarity::Unclear,
    }
}

fn details(m: Modality, p: Polarity) -> [&'static str; 4] {
    use Modality::*;
    use Polarity::*;
    match (m, p) {
        (Visual, Fabricated) => [
            "lighting shifts abruptly between cuts",
            "facial expressions do not match the described event",
            "scene layout contradicts the claimed location",
            "frames show signs of splicing around the key moment",
        ],
        (Visual, Authentic) => [
            "lighting and shadows stay stable across frames",
            "expressions fit the described event",
            "scene layout matches the claimed location",
            "no splicing artifacts are visible",
        ],
        (Visual, Unclear) => [
            "frames are too short to judge lighting",
            "expressions are hard to read at this resolution",
            "the location cannot be confirmed from the frames",
            "visual evidence is mixed",
        ],
        (Text, Fabricated) => [
            "the title exaggerates beyond what the footage supports",
            "subtitles contradict known facts",
            "the wording relies on emotional manipulation",
            "claims conflict with the cited sources",
        ],
        (Text, Authentic) => [
            "the title is measured and specific",
            "subtitles agree with known facts",
            "the wording is neutral",
            "claims agree with the cited sources",
        ],
        (Text, Unclear) => [
            "the text is too brief to verify",
            "sources are not named",
            "the claims are vague",
            "textual evidence is mixed",
        ],
        (Audio, Fabricated) => [
            "the voice track appears spliced",
            "background sound does not fit the scene",
            "speech content conflicts with the captions",
            "audio levels jump at the edit points",
        ],
        (Audio, Authentic) => [
            "the voice track is continuous",
            "background sound fits the scene",
            "speech agrees with the captions",
            "audio levels are steady",
        ],
        (Audio, Unclear) => [
            "the audio is too noisy to judge",
            "speech is partly inaudible",
            "background sound is ambiguous",
            "acoustic evidence is mixed",
        ],
    }
}

fn noun(m: Modality) -> &'static str {
    match m {
        Modality::Visual => "visual content",
        Modality::Text => "narrative text",
        Modality::Audio => "audio track",
    }
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn variant(&self, req: &ReasoningRequest) -> usize {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write_u64(req.attempt as u64);
        h.write(req.prompt.as_bytes());
        h.write(req.content.as_bytes());
        (h.finish() % 4) as usize
    }
}

impl ReasoningClient for StubClient {
    fn generate(&self, req: &ReasoningRequest) -> Result<String, DgmpError> {
        let polarity = if req.content.contains(FABRICATED_MARKER) {
            Polarity::Fabricated
        } else if req.content.contains(VERIFIED_MARKER) {
            Polarity::Authentic
        } else {
            consensus(&req.prompt)
        };
        let detail = details(req.modality, polarity)[self.variant(req)];
        let noun = noun(req.modality);
        let mut text = match polarity {
            Polarity::Fabricated => {
                format!("Assessment: likely fabricated. The {noun} is {INCONSISTENCY_PHRASE}; {detail}.")
            }
            Polarity::Authentic => format!("Assessment: likely authentic. The {noun} is coherent with the stated claim; {detail}."),
            Polarity::Unclear => format!("Assessment: uncertain. The {noun} offers no decisive cue; {detail}."),
        };
        if let Some(d) = prompt_domain(&req.prompt) {
            text.push_str(&format!(" Judged against typical {d} coverage."));
        }
        Ok(text)
    }
}
