use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim())
            .unwrap_or_else(|e| panic!("stdout is not one JSON document ({e}):\n{}", self.stdout))
    }
}

fn rasr(dir: &Path, args: &[&str]) -> Run {
    rasr_env(dir, args, &[])
}

fn rasr_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_rasr"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("RASR_CHAT_URL")
        .env_remove("RASR_EMBED_URL")
        .envs(env.iter().copied())
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// Temp dir holding a 200-record synthetic corpus `c.jsonl`.
fn with_corpus() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let r = rasr(dir.path(), &["synth", "--n", "200", "--seed", "3", "--out", "c.jsonl"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    dir
}

/// Corpus plus a 2-epoch checkpoint `m.ckpt`.
fn with_checkpoint() -> TempDir {
    let dir = with_corpus();
    let r = rasr(
        dir.path(),
        &["train", "--preset", "desk", "--set", "epochs=2", "--corpus", "c.jsonl", "--out", "m.ckpt"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    dir
}

fn manifest(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn validate_well_formed_corpus() {
    let dir = with_corpus();
    let r = rasr(dir.path(), &["--json", "validate", "c.jsonl", "--preset", "desk"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["result"]["records"], 200);
    assert_eq!(v["result"]["fake"], 50);
    assert_eq!(v["result"]["domains"].as_object().unwrap().len(), 9);
    assert!(dir.path().join("rasr-validate.manifest.json").exists());
}

#[test]
fn validate_rejects_wrong_dimensions() {
    let dir = with_corpus();
    let r = rasr(dir.path(), &["validate", "c.jsonl"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("expected 768"), "{}", r.stderr);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = rasr(dir.path(), &["frobnicate"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("Usage:"), "{}", r.stderr);
    assert!(r.stdout.is_empty());
}

#[test]
fn json_output_on_every_path() {
    let dir = with_checkpoint();
    let p = dir.path();
    fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["--json", "frobnicate"], 1),
        (vec!["--json", "--help"], 0),
        (vec!["--json", "train", "--corpus", "c.jsonl"], 1),
        (vec!["--json", "validate", "missing.jsonl", "--preset", "desk"], 2),
        (vec!["--json", "validate", "c.jsonl"], 2),
        (vec!["--json", "validate", "c.jsonl", "--preset", "desk"], 0),
        (vec!["--json", "eval", "--checkpoint", "junk.ckpt", "--corpus", "c.jsonl"], 2),
        (vec!["--json", "eval", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--set", "d_h=8"], 1),
        (vec!["--json", "lodo", "--preset", "desk", "--corpus", "c.jsonl", "--target", "Atlantis"], 1),
        (vec!["--json", "sweep", "--preset", "desk", "--corpus", "c.jsonl", "--param", "nope", "--values", "1"], 1),
        (vec!["--json", "retrieve", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--id", "nobody"], 2),
    ];
    for (args, code) in cases {
        let r = rasr(p, &args);
        assert_eq!(r.code, code, "{args:?}: {}", r.stderr);
        let v = r.json();
        assert_eq!(v["exit_code"], code, "{args:?}");
        assert_eq!(v["status"], if code == 0 { "ok" } else { "error" }, "{args:?}");
        if code != 0 {
            assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
            assert!(!r.stderr.is_empty());
        }
    }
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = with_checkpoint();
    let p = dir.path();
    let hist = fs::read_to_string(p.join("m.ckpt.history.jsonl")).unwrap();
    let lines: Vec<Value> = hist.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let keys: Vec<&str> = l.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["epoch", "train_loss", "val_loss", "val_accuracy", "val_macro_f1", "lr"] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(l["epoch"], i + 1);
    }

    let m = manifest(p, "m.ckpt.manifest.json");
    assert_eq!(m["command"], "train");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["config"]["d_h"], 32);
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs[0]["path"], "c.jsonl");
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs {
        let bytes = fs::read(p.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["bytes"], bytes.len());
        assert_eq!(o["sha256"].as_str().unwrap(), rasr_cli::manifest::sha256_hex(&bytes));
    }
    let leftovers: Vec<_> = fs::read_dir(p)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn config_file_then_overrides() {
    let dir = with_corpus();
    let p = dir.path();
    let conf = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf")).unwrap();
    fs::write(p.join("run.conf"), conf.replace("epochs = 30", "epochs = 3")).unwrap();
    let r = rasr(
        p,
        &["train", "--config", "run.conf", "--set", "epochs=1", "--set", "seed=5", "--corpus", "c.jsonl", "--out", "a.ckpt"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m = manifest(p, "a.ckpt.manifest.json");
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["d_v"], 32);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(p.join("a.ckpt.history.jsonl")).unwrap().lines().count(), 1);

    fs::write(p.join("bad.conf"), "epochs 3\n").unwrap();
    let r = rasr(p, &["train", "--config", "bad.conf", "--corpus", "c.jsonl", "--out", "b.ckpt"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 1"), "{}", r.stderr);
}

#[test]
fn same_seed_same_artifacts() {
    let dir = with_corpus();
    let p = dir.path();
    for out in ["x.ckpt", "y.ckpt"] {
        let r = rasr(p, &["train", "--preset", "desk", "--set", "epochs=2", "--corpus", "c.jsonl", "--out", out]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    assert_eq!(fs::read(p.join("x.ckpt")).unwrap(), fs::read(p.join("y.ckpt")).unwrap());
    assert_eq!(
        fs::read(p.join("x.ckpt.history.jsonl")).unwrap(),
        fs::read(p.join("y.ckpt.history.jsonl")).unwrap()
    );
}

#[test]
fn replay_reproduces_checksums() {
    let dir = with_checkpoint();
    let p = dir.path();
    let before = manifest(p, "m.ckpt.manifest.json");
    fs::write(p.join("m.ckpt"), b"clobbered").unwrap();
    let r = rasr(p, &["--json", "replay", "m.ckpt.manifest.json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let rows = v["result"]["outputs"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["match"] == true));
    assert_eq!(manifest(p, "m.ckpt.manifest.json"), before);
    let rm = manifest(p, "m.ckpt.manifest.json.replay.json");
    assert_eq!(rm["command"], "replay");
    assert_eq!(rm["outputs"], before["outputs"]);

    let synth = rasr(p, &["replay", "c.jsonl.manifest.json"]);
    assert_eq!(synth.code, 0, "{}", synth.stderr);
}

#[test]
fn replay_refuses_changed_input() {
    let dir = with_checkpoint();
    let p = dir.path();
    let mut corpus = fs::read_to_string(p.join("c.jsonl")).unwrap();
    corpus.push('\n');
    fs::write(p.join("c.jsonl"), corpus).unwrap();
    let r = rasr(p, &["replay", "m.ckpt.manifest.json"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("changed"), "{}", r.stderr);
}

#[test]
fn eval_matches_training_split() {
    let dir = with_checkpoint();
    let p = dir.path();
    let r = rasr(p, &["--json", "eval", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--split", "test", "--manifest", "e.json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let train = rasr(p, &["--json", "train", "--preset", "desk", "--set", "epochs=2", "--corpus", "c.jsonl", "--out", "m2.ckpt"]).json();
    assert_eq!(v["result"]["metrics"], train["result"]["test"]);
    assert_eq!(v["result"]["size"], train["result"]["test_size"]);
    let c = &v["result"]["metrics"]["confusion"];
    let total: u64 = ["tp", "fp", "tn", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(v["result"]["size"], total);
    assert_eq!(manifest(p, "e.json")["command"], "eval");
}

#[test]
fn robustness_default_grid() {
    let dir = with_checkpoint();
    let p = dir.path();
    let r = rasr(p, &["--json", "robustness", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--split", "test"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let ratios: Vec<f64> = v["result"]["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["ratio"].as_f64().unwrap())
        .collect();
    assert_eq!(ratios, vec![0.0, 0.1, 0.2, 0.3, 0.5]);
    let ev = rasr(p, &["--json", "eval", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--split", "test"]).json();
    assert_eq!(v["result"]["points"][0]["metrics"], ev["result"]["metrics"]);

    let r = rasr(p, &["robustness", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--ratios", "1.5"]);
    assert_eq!(r.code, 2);
}

#[test]
fn lodo_holds_out_target() {
    let dir = with_corpus();
    let r = rasr(
        dir.path(),
        &["--json", "lodo", "--preset", "desk", "--set", "epochs=1", "--corpus", "c.jsonl", "--target", "Health"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    assert_eq!(v["result"]["target"], "Health");
    let corpus = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let health = corpus.lines().filter(|l| l.contains("\"domain\":\"Health\"")).count();
    assert!(health > 0);
    assert_eq!(v["result"]["test_size"], health);
    assert_eq!(v["result"]["train_size"], 200 - health);
}

#[test]
fn ablate_variants() {
    let dir = with_corpus();
    let p = dir.path();
    let r = rasr(
        p,
        &["--json", "ablate", "--preset", "desk", "--set", "epochs=1", "--corpus", "c.jsonl", "--variant", "no-alignment"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = r.json()["result"]["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["variant"], "no-alignment");

    let r = rasr(
        p,
        &["--json", "ablate", "--preset", "desk", "--set", "epochs=1", "--corpus", "c.jsonl", "--variant", "all"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let names: Vec<String> = r.json()["result"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        ["full", "no-retrieval", "no-domain-guide", "no-reasoning", "no-decoupling", "no-alignment"]
    );

    let r = rasr(p, &["ablate", "--preset", "desk", "--corpus", "c.jsonl", "--variant", "no-everything"]);
    assert_eq!(r.code, 1);
}

#[test]
fn sweep_rows_per_value() {
    let dir = with_corpus();
    let r = rasr(
        dir.path(),
        &["--json", "sweep", "--preset", "desk", "--set", "epochs=1", "--corpus", "c.jsonl", "--param", "k", "--values", "2,4"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let rows = v["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["value"], 2.0);
    assert_eq!(rows[1]["value"], 4.0);
    assert!(rows.iter().all(|r| r["param"] == "k"));

    let r = rasr(
        dir.path(),
        &["sweep", "--preset", "desk", "--corpus", "c.jsonl", "--param", "d_s", "--values", "0"],
    );
    assert_eq!(r.code, 2);
}

#[test]
fn retrieve_dump_is_ranked() {
    let dir = with_checkpoint();
    let r = rasr(
        dir.path(),
        &["--json", "retrieve", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--id", "syn-00007"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let items = v["result"]["context"]["items"].as_array().unwrap();
    assert_eq!(items.len(), 8);
    assert!(items.iter().all(|i| i["id"] != "syn-00007"));
    let scores: Vec<f64> = items.iter().map(|i| i["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let alpha: f64 = v["result"]["alpha"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).sum();
    assert!((alpha - 1.0).abs() < 1e-12);
}

#[test]
fn report_dump_has_three_modalities() {
    let dir = with_checkpoint();
    let r = rasr(
        dir.path(),
        &["--json", "report", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--id", "syn-00007"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    let p = v["result"]["prob_fake"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    for m in ["v", "t", "a"] {
        let e = &v["result"]["modalities"][m];
        assert!(e["prompt"].as_str().unwrap().contains("Domain: "), "{m}");
        assert!(!e["report"].as_str().unwrap().is_empty(), "{m}");
        let c = e["confidence"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }
    assert_eq!(v["result"]["references"].as_array().unwrap().len(), 8);
}

#[test]
fn unreachable_backend_exits_three() {
    let dir = with_checkpoint();
    let r = rasr_env(
        dir.path(),
        &[
            "--json",
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--corpus",
            "c.jsonl",
            "--split",
            "test",
            "--set",
            "reasoning_backend=http",
            "--set",
            "http_backoff_secs=0.001",
            "--set",
            "http_timeout_secs=2",
        ],
        &[("RASR_CHAT_URL", "http://127.0.0.1:9/v1/chat/completions")],
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert_eq!(r.json()["kind"], "backend");
}

#[test]
fn missing_endpoint_is_data_error() {
    let dir = with_checkpoint();
    let r = rasr(
        dir.path(),
        &["eval", "--checkpoint", "m.ckpt", "--corpus", "c.jsonl", "--set", "reasoning_backend=http"],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("RASR_CHAT_URL"), "{}", r.stderr);
}
