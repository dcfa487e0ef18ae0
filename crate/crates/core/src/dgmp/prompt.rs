use crate::corpus::{Domain, Label, Modality};
use crate::cspr::{MemoryBank, RetrievedContext};

/// One retrieved sample as shown to the reasoning model.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub id: String,
    pub label: Label,
    pub domain: Domain,
    pub text: String,
}

pub fn references_from(ctx: &RetrievedContext, bank: &MemoryBank) -> Vec<Reference> {
    ctx.items
        .iter()
        .map(|it| {
            let e = &bank.entries()[it.entry];
            Reference {
                id: e.id.clone(),
                label: e.label,
                domain: e.domain,
                text: e.text.clone(),
            }
        })
        .collect()
}

fn task_line(m: Modality) -> &'static str {
    match m {
        Modality::Visual => "Analyze the authenticity of video frames.",
        Modality::Text => "Analyze the authenticity of the video's text (title, subtitles, and on-screen text).",
        Modality::Audio => "Analyze the authenticity of the video's audio track.",
    }
}

fn instruction_line(m: Modality) -> &'static str {
    match m {
        Modality::Visual => {
            "Please analyze the provided video frames, focusing on potential inconsistencies related to the \
             domain and reference samples (facial expressions, scene logic, lighting anomalies, etc.). \
             Output a brief analysis report:"
        }
        Modality::Text => {
            "Please analyze the provided text, focusing on potential inconsistencies related to the domain \
             and reference samples (exaggerated claims, factual contradictions, emotional manipulation, etc.). \
             Output a brief analysis report:"
        }
        Modality::Audio => {
            "Please analyze the provided audio, focusing on potential inconsistencies related to the domain \
             and reference samples (voice splicing, background-sound mismatch, speech-content conflicts, etc.). \
             Output a brief analysis report:"
        }
    }
}

fn digest(text: &str, budget: usize) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= budget {
        flat
    } else {
        let cut: String = flat.chars().take(budget).collect();
        format!("{cut}...")
    }
}

/// Fills the Task / Domain / Reference samples / Instruction template.
///
/// `domain = None` drops the domain line entirely. Each reference text is
/// cut to `text_budget` characters.
pub fn build_prompt(modality: Modality, domain: Option<Domain>, refs: &[Reference], text_budget: usize) -> String {
    let mut out = format!("Task: {}\n", task_line(modality));
    if let Some(d) = domain {
        out.push_str(&format!("Domain: {d}.\n"));
    }
    if refs.is_empty() {
        out.push_str("Reference samples: none (no reference samples were retrieved).\n");
    } else {
        out.push_str("Reference samples: Retrieved samples with similar claims:\n");
        for (k, r) in refs.iter().enumerate() {
            out.push_str(&format!(
                "[{}] id={} | domain={} | label={} | text: {}\n",
                k + 1,
                r.id,
                r.domain,
                r.label,
                digest(&r.text, text_budget)
            ));
        }
    }
    out.push_str(&format!("Instruction: {}", instruction_line(modality)));
    out
}
