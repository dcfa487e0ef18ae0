use rasr_cli::manifest::{sha256_hex, sibling, write_atomic, Artifact, RunManifest};

#[test]
fn sha256_known_vectors() {
    assert_eq!(
        sha256_hex(b""),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn sibling_appends_to_file_name() {
    assert_eq!(
        sibling(std::path::Path::new("out/m.ckpt"), ".manifest.json"),
        std::path::PathBuf::from("out/m.ckpt.manifest.json")
    );
}

#[test]
fn atomic_write_replaces_whole_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.txt");
    write_atomic(&p, b"first version, longer").unwrap();
    write_atomic(&p, b"second").unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), b"second");
    assert!(!dir.path().join("f.txt.tmp").exists());
    let a = Artifact::of(&p).unwrap();
    assert_eq!(a.bytes, 6);
    assert_eq!(a.sha256, sha256_hex(b"second"));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    let m = RunManifest {
        tool_version: "0.1.0".into(),
        command: "train".into(),
        args: vec!["train".into(), "--corpus".into(), "c.jsonl".into()],
        config: Some(serde_json::json!({"epochs": 2, "tau": 0.07})),
        seed: Some(7),
        inputs: vec![],
        outputs: vec![Artifact {
            path: "m.ckpt".into(),
            sha256: sha256_hex(b"x"),
            bytes: 1,
        }],
        started_unix_ms: 1,
        wall_clock_secs: 0.5,
        exit_code: 0,
        error: None,
    };
    m.save(&p).unwrap();
    assert_eq!(RunManifest::load(&p).unwrap(), m);
    std::fs::write(&p, "{").unwrap();
    assert!(RunManifest::load(&p).is_err());
}
