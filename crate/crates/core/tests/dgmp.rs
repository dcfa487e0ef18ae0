use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rasr_core::corpus::{Domain, Label, Modality, VideoRecord};
use rasr_core::dgmp::{
    build_prompt, compute_confidence, gate_report, DgmpError, Embedder, GateInputs, HttpChatClient, HttpEmbedder,
    HttpSettings, ReasoningClient, ReasoningRequest, Reference, ReportEngine, ReportJob, RetryPolicy, StubClient,
    StubEmbedder, INCONSISTENCY_PHRASE,
};
use rasr_core::numerics::{cosine, norm};

fn record(text: &str) -> VideoRecord {
    VideoRecord {
        id: "r1".into(),
        domain: Domain::Health,
        label: Label::Fake,
        text: text.into(),
        visual: vec![0.1, 0.2],
        textual: vec![0.3, 0.4],
        audio: vec![0.5],
        reports: None,
    }
}

fn refs(n: usize) -> Vec<Reference> {
    (0..n)
        .map(|k| Reference {
            id: format!("ref-{k}"),
            label: if k % 2 == 0 { Label::Fake } else { Label::Real },
            domain: Domain::Health,
            text: format!("reference text number {k} about a clinic"),
        })
        .collect()
}

/// Looks each text up in a fixed table of vectors.
struct TableEmbedder(HashMap<String, Vec<f64>>);

impl Embedder for TableEmbedder {
    fn dim(&self) -> usize {
        2
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, DgmpError> {
        self.0.get(text).cloned().ok_or(DgmpError::EmptyText)
    }
}

/// Returns its scripted replies in turn, repeating the last.
struct ScriptClient {
    replies: Vec<&'static str>,
    calls: Mutex<usize>,
}

impl ScriptClient {
    fn new(replies: Vec<&'static str>) -> Self {
        Self {
            replies,
            calls: Mutex::new(0),
        }
    }
    fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

impl ReasoningClient for ScriptClient {
    fn generate(&self, req: &ReasoningRequest) -> Result<String, DgmpError> {
        *self.calls.lock().unwrap() += 1;
        Ok(self.replies[req.attempt.min(self.replies.len() - 1)].to_string())
    }
}

fn table(entries: &[(&str, [f64; 2])]) -> TableEmbedder {
    TableEmbedder(entries.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect())
}

#[test]
fn prompt_template_fields() {
    let p = build_prompt(Modality::Visual, Some(Domain::Health), &refs(2), 160);
    assert!(p.starts_with("Task: Analyze the authenticity of video frames.\n"));
    assert!(p.contains("Domain: Health"));
    assert_eq!(p.lines().filter(|l| l.starts_with('[')).count(), 2);
    assert!(p.contains("Instruction: Please analyze the provided video frames"));

    let empty = build_prompt(Modality::Text, Some(Domain::Finance), &[], 160);
    assert!(empty.contains("no reference samples"));
    assert!(empty.contains("Domain: Finance"));

    let nodomain = build_prompt(Modality::Audio, None, &refs(1), 160);
    assert!(!nodomain.contains("Domain:"));
}

#[test]
fn prompt_truncates_reference_text() {
    let mut r = refs(1);
    r[0].text = "x".repeat(500);
    let p = build_prompt(Modality::Visual, Some(Domain::Health), &r, 20);
    let line = p.lines().find(|l| l.starts_with("[1]")).unwrap();
    assert!(line.ends_with(&format!("{}...", "x".repeat(20))));
}

#[test]
fn prompt_contains_domain_for_every_domain() {
    for d in Domain::ALL {
        for m in Modality::ALL {
            let p = build_prompt(m, Some(d), &refs(3), 40);
            assert!(p.contains(&format!("Domain: {d}")));
        }
    }
}

#[test]
fn stub_client_is_deterministic_and_follows_markers() {
    let c = StubClient::new(7);
    let prompt = build_prompt(Modality::Text, Some(Domain::Health), &refs(2), 160);
    let req = ReasoningRequest {
        modality: Modality::Text,
        prompt: prompt.clone(),
        content: "vaccine claim #fabricated".into(),
        feature_digest: String::new(),
        attempt: 0,
    };
    let a = c.generate(&req).unwrap();
    assert_eq!(a, c.generate(&req).unwrap());
    assert!(a.contains(INCONSISTENCY_PHRASE));
    assert!(a.contains("Health"));

    let verified = ReasoningRequest {
        content: "vaccine claim #verified".into(),
        ..req.clone()
    };
    assert!(!c.generate(&verified).unwrap().contains(INCONSISTENCY_PHRASE));

    // No marker: majority of same-domain references (refs(3) has two fakes).
    let prompt3 = build_prompt(Modality::Visual, Some(Domain::Health), &refs(3), 160);
    let plain = ReasoningRequest {
        modality: Modality::Visual,
        prompt: prompt3,
        content: "a clinic opens".into(),
        ..req
    };
    assert!(c.generate(&plain).unwrap().contains(INCONSISTENCY_PHRASE));
}

#[test]
fn confidence_examples() {
    let e = table(&[
        ("rep", [1.0, 0.0]),
        ("same", [1.0, 0.0]),
        ("orth", [0.0, 1.0]),
        ("c09", [0.9, (1.0f64 - 0.81).sqrt()]),
        ("c06", [0.6, 0.8]),
    ]);
    assert!((compute_confidence("rep", &["same", "same"], &e).unwrap() - 1.0).abs() < 1e-6);
    assert!(compute_confidence("rep", &["orth", "orth"], &e).unwrap().abs() < 1e-6);
    let c = compute_confidence("rep", &["c09", "c06", "orth"], &e).unwrap();
    assert!((c - 0.5).abs() < 1e-9, "{c}");
    assert_eq!(compute_confidence("rep", &[], &e).unwrap(), 1.0);
}

#[test]
fn gate_accepts_confident_first_attempt() {
    let e = table(&[("good", [0.8, 0.6]), ("ref", [1.0, 0.0])]);
    let client = ScriptClient::new(vec!["good"]);
    let rec = record("x");
    let inputs = GateInputs {
        record: &rec,
        modality: Modality::Visual,
        prompt: "p",
        references: vec!["ref"],
    };
    let r = gate_report(&client, &e, &inputs, 0.75, 2).unwrap();
    assert_eq!(r.attempts, 1);
    assert!(!r.low_confidence);
    assert!((r.confidence - 0.8).abs() < 1e-12);
    assert_eq!(r.parsing_feature, vec![0.8, 0.6]);
}

#[test]
fn gate_flags_and_scales_low_confidence() {
    let e = table(&[("weak", [1.0, 0.0]), ("ref", [0.5, 0.75f64.sqrt()])]);
    let client = ScriptClient::new(vec!["weak"]);
    let rec = record("x");
    let inputs = GateInputs {
        record: &rec,
        modality: Modality::Text,
        prompt: "p",
        references: vec!["ref"],
    };
    let r = gate_report(&client, &e, &inputs, 0.75, 2).unwrap();
    assert_eq!(r.attempts, 3);
    assert_eq!(client.calls(), 3);
    assert!(r.low_confidence);
    assert!((r.confidence - 0.5).abs() < 1e-12);
    assert!((r.parsing_feature[0] - 0.6667).abs() < 1e-4);
    assert!((r.parsing_feature[0] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.parsing_feature[1], 0.0);

    let once = ScriptClient::new(vec!["weak"]);
    let r0 = gate_report(&once, &e, &inputs, 0.75, 0).unwrap();
    assert_eq!((r0.attempts, once.calls()), (1, 1));
    assert!(r0.low_confidence);
}

#[test]
fn gate_keeps_best_attempt_and_stops_early() {
    let e = table(&[
        ("bad", [0.0, 1.0]),
        ("mid", [0.6, 0.8]),
        ("good", [0.8, 0.6]),
        ("ref", [1.0, 0.0]),
    ]);
    let rec = record("x");
    let inputs = GateInputs {
        record: &rec,
        modality: Modality::Audio,
        prompt: "p",
        references: vec!["ref"],
    };
    let client = ScriptClient::new(vec!["bad", "mid", "good", "bad"]);
    let r = gate_report(&client, &e, &inputs, 0.75, 5).unwrap();
    assert_eq!((r.text.as_str(), r.attempts), ("good", 3));

    let client = ScriptClient::new(vec!["mid", "bad"]);
    let r = gate_report(&client, &e, &inputs, 0.75, 1).unwrap();
    assert_eq!(r.text, "mid");
    assert!(r.low_confidence);
    assert!((r.parsing_feature[0] - 0.6 * 0.8).abs() < 1e-12);
}

#[test]
fn gate_rejects_empty_completion() {
    let e = table(&[("ref", [1.0, 0.0])]);
    let rec = record("x");
    let inputs = GateInputs {
        record: &rec,
        modality: Modality::Audio,
        prompt: "p",
        references: vec!["ref"],
    };
    let client = ScriptClient::new(vec!["  "]);
    assert!(matches!(
        gate_report(&client, &e, &inputs, 0.75, 2),
        Err(DgmpError::EmptyCompletion)
    ));
}

#[test]
fn stub_embedder_contract() {
    let e = StubEmbedder::new(384, 3);
    let a = e.embed("The narrative text is inconsistent with the stated claim").unwrap();
    assert_eq!(a.len(), 384);
    assert!((norm(&a) - 1.0).abs() < 1e-6);
    assert_eq!(a, e.embed("The narrative text is inconsistent with the stated claim").unwrap());
    assert!(matches!(e.embed("   "), Err(DgmpError::EmptyText)));

    let b = e.embed("lighting shadows stable across frames").unwrap();
    let c = e.embed("voice track spliced background mismatch").unwrap();
    assert!(cosine(&b, &c).unwrap() <= 0.2);

    // Disjoint vocabularies over many pairs.
    let mut worst: f64 = -1.0;
    for i in 0..200 {
        let x = e.embed(&format!("alpha{i} beta{i} gamma{i} delta{i}")).unwrap();
        let y = e.embed(&format!("omega{i} sigma{i} kappa{i} theta{i}")).unwrap();
        worst = worst.max(cosine(&x, &y).unwrap());
    }
    assert!(worst <= 0.2, "max disjoint cosine {worst}");
}

#[test]
fn stub_stage_reports_are_reproducible() {
    let rec_a = record("claim #fabricated");
    let rec_b = record("claim #verified");
    let prompt = build_prompt(Modality::Visual, Some(Domain::Health), &refs(2), 80);
    let ref_text = "Assessment: likely fabricated. The visual content is inconsistent with the stated claim; lighting shifts abruptly between cuts. Judged against typical Health coverage.".to_string();
    let jobs: Vec<ReportJob> = [&rec_a, &rec_b]
        .iter()
        .flat_map(|r| {
            Modality::ALL.map(|m| ReportJob {
                record: r,
                modality: m,
                prompt: prompt.clone(),
                references: vec![ref_text.clone()],
            })
        })
        .collect();
    let run = |threads| {
        let engine = ReportEngine::new(
            Arc::new(StubClient::new(1)),
            Arc::new(StubEmbedder::new(64, 1)),
            0.75,
            2,
            threads,
        );
        engine.run(&jobs).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.failures, 0);
    assert_eq!(a.reports, b.reports);
    for (job, rep) in jobs.iter().zip(&a.reports) {
        assert_eq!(job.modality, rep.modality);
        assert!(rep.attempts >= 1 && rep.attempts <= 3);
        assert_eq!(rep.low_confidence, rep.confidence < 0.75);
        assert!((-1.0..=1.0).contains(&rep.confidence));
    }
    assert!(a.reports[0].text.contains(INCONSISTENCY_PHRASE));
    assert!(!a.reports[3].text.contains(INCONSISTENCY_PHRASE));
}

struct FailingClient;

impl ReasoningClient for FailingClient {
    fn generate(&self, _: &ReasoningRequest) -> Result<String, DgmpError> {
        Err(DgmpError::Backend {
            attempts: 3,
            message: "down".into(),
        })
    }
}

#[test]
fn stage_fails_run_only_when_everything_fails() {
    let rec = record("x");
    let jobs = vec![ReportJob {
        record: &rec,
        modality: Modality::Visual,
        prompt: "p".into(),
        references: vec![],
    }];
    let engine = ReportEngine::new(Arc::new(FailingClient), Arc::new(StubEmbedder::new(8, 0)), 0.75, 2, 2);
    assert!(matches!(engine.run(&jobs), Err(DgmpError::Backend { .. })));
    assert!(engine.run(&[]).unwrap().reports.is_empty());
}

/// Serves canned (status, body) pairs and records request bodies.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, Option<String>)>>>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok(mut req) = server.recv() else { return };
            let mut s = String::new();
            req.as_reader().read_to_string(&mut s).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            seen2.lock().unwrap().push((s, auth));
            let resp = tiny_http::Response::from_string(body).with_status_code(status);
            req.respond(resp).unwrap();
        }
    });
    (url, seen)
}

fn settings(url: String, audit: Option<std::path::PathBuf>) -> HttpSettings {
    HttpSettings {
        url,
        model: "m".into(),
        token: Some("secret".into()),
        timeout: Duration::from_secs(10),
        retry: RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(5),
        },
        audit_log: audit,
    }
}

fn chat_request() -> ReasoningRequest {
    ReasoningRequest {
        modality: Modality::Visual,
        prompt: "Task: x".into(),
        content: "claim".into(),
        feature_digest: "dim=2".into(),
        attempt: 0,
    }
}

#[test]
fn http_chat_sends_decoding_settings_and_retries() {
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Assessment: fine."}}]}"#;
    let (url, seen) = mock_server(vec![(500, "boom".into()), (200, ok.into())]);
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("audit.jsonl");
    let client = HttpChatClient::new(settings(url, Some(audit.clone())), 0.2, 0.9, 256).unwrap();
    let text = client.generate(&chat_request()).unwrap();
    assert_eq!(text, "Assessment: fine.");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let body: serde_json::Value = serde_json::from_str(&seen[1].0).unwrap();
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["role"], "user");
    assert!(body["messages"][1]["content"].as_str().unwrap().contains("claim"));
    assert_eq!(seen[1].1.as_deref(), Some("Bearer secret"));

    let log = std::fs::read_to_string(audit).unwrap();
    assert_eq!(log.lines().count(), 2);
    for l in log.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}

#[test]
fn http_chat_errors() {
    let empty = r#"{"choices":[{"message":{"content":"   "}}]}"#;
    let (url, _) = mock_server(vec![(200, empty.into())]);
    let client = HttpChatClient::new(settings(url, None), 0.2, 0.9, 16).unwrap();
    assert!(matches!(client.generate(&chat_request()), Err(DgmpError::EmptyCompletion)));

    let (url, seen) = mock_server(vec![(503, "a".into()), (503, "b".into()), (503, "c".into())]);
    let client = HttpChatClient::new(settings(url, None), 0.2, 0.9, 16).unwrap();
    match client.generate(&chat_request()) {
        Err(DgmpError::Backend { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("503"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_embedder_normalizes_and_checks_dim() {
    let body = r#"{"data":[{"embedding":[3.0, 4.0]}]}"#;
    let (url, seen) = mock_server(vec![(200, body.into()), (200, body.into())]);
    let e = HttpEmbedder::new(settings(url.clone(), None), 2).unwrap();
    let v = e.embed("hello").unwrap();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    let req: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0].0).unwrap();
    assert_eq!(req["input"][0], "hello");

    let e3 = HttpEmbedder::new(settings(url, None), 3).unwrap();
    assert!(matches!(
        e3.embed("hello"),
        Err(DgmpError::EmbeddingDim { expected: 3, actual: 2 })
    ));
}
