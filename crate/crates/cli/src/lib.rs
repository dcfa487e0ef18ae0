//! The `rasr` command line: corpus checks, training, evaluation harnesses and
//! run manifests.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::Parser;
use rasr_core::config::TrainConfig;
use serde_json::{json, Value};

use args::{Cli, Command};
use commands::{execute, Ctx, Output, Record};
use error::Failure;
use manifest::{sibling, Artifact, RunManifest};

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn emit_failure(f: &Failure, json_out: bool, command: Option<&str>, manifest: Option<&Path>) {
    eprintln!("error: {}", f.message().trim_end());
    if json_out {
        let v = json!({
            "status": "error",
            "command": command,
            "exit_code": f.code(),
            "kind": f.kind(),
            "message": f.message().trim_end(),
            "manifest": manifest.map(|p| p.display().to_string()),
        });
        println!("{v}");
    }
}

/// Runs one invocation; `args` includes the program name. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    init_logging();
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_out = argv.iter().skip(1).any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    if json_out {
                        println!("{}", json!({"status": "ok", "exit_code": 0, "text": text}));
                    } else {
                        print!("{text}");
                    }
                    0
                }
                _ => {
                    let msg = text.trim_start_matches("error: ").to_string();
                    let f = Failure::Usage(msg);
                    emit_failure(&f, json_out, None, None);
                    f.code()
                }
            };
        }
    };

    let started = SystemTime::now();
    let clock = Instant::now();
    let mut rec = Record::default();
    let res = execute(&cli.command, &Ctx::default(), &mut rec);
    let code = res.as_ref().map_or_else(Failure::code, |_| 0);

    let name = cli.command.name();
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| default_manifest_path(&cli.command, &rec));
    let m = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: name.to_string(),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        config: rec.config.clone(),
        seed: rec.seed,
        inputs: artifacts(&rec.inputs),
        outputs: artifacts(&rec.outputs),
        started_unix_ms: started.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        exit_code: code,
        error: res.as_ref().err().map(|f| f.message().to_string()),
    };
    let saved = m.save(&manifest_path);

    let res = match (res, saved) {
        (Ok(_), Err(e)) => Err(Failure::Data(format!(
            "cannot write manifest {}: {e}",
            manifest_path.display()
        ))),
        (r, Err(e)) => {
            log::warn!("cannot write manifest {}: {e}", manifest_path.display());
            r
        }
        (r, Ok(())) => {
            log::info!("manifest: {}", manifest_path.display());
            r
        }
    };
    match res {
        Ok(Output { result, human }) => {
            if json_out {
                let v = json!({
                    "status": "ok",
                    "command": name,
                    "exit_code": 0,
                    "manifest": manifest_path.display().to_string(),
                    "result": result,
                });
                println!("{v}");
            } else {
                println!("{human}");
            }
            0
        }
        Err(f) => {
            emit_failure(&f, json_out, Some(name), Some(&manifest_path));
            f.code()
        }
    }
}

fn artifacts(paths: &[PathBuf]) -> Vec<Artifact> {
    paths
        .iter()
        .filter_map(|p| match Artifact::of(p) {
            Ok(a) => Some(a),
            Err(e) => {
                log::debug!("no checksum for {}: {e}", p.display());
                None
            }
        })
        .collect()
}

fn default_manifest_path(cmd: &Command, rec: &Record) -> PathBuf {
    if let Command::Replay { recorded } = cmd {
        return sibling(recorded, ".replay.json");
    }
    match rec.outputs.first() {
        Some(out) => sibling(out, ".manifest.json"),
        None => PathBuf::from(format!("rasr-{}.manifest.json", cmd.name())),
    }
}

fn takes_config(cmd: &Command) -> bool {
    matches!(
        cmd,
        Command::Validate { .. } | Command::Train { .. } | Command::Lodo { .. } | Command::Ablate { .. } | Command::Sweep { .. }
    )
}

/// Re-runs the command in `path` with its resolved config and checks that
/// every recorded output is reproduced byte for byte.
pub(crate) fn replay(path: &Path, rec: &mut Record) -> Result<Output, Failure> {
    rec.inputs.push(path.to_path_buf());
    let m = RunManifest::load(path).map_err(Failure::Data)?;
    if m.command == "replay" {
        return Err(Failure::Data("a replay manifest cannot be replayed".into()));
    }
    if m.exit_code != 0 {
        return Err(Failure::Data(format!("the recorded run failed with exit code {}", m.exit_code)));
    }
    for a in &m.inputs {
        let now = Artifact::of(Path::new(&a.path))
            .map_err(|e| Failure::Data(format!("input {} is unavailable: {e}", a.path)))?;
        if now.sha256 != a.sha256 {
            return Err(Failure::Data(format!("input {} changed since the recorded run", a.path)));
        }
    }
    let argv = std::iter::once("rasr".to_string()).chain(m.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| Failure::Data(format!("recorded arguments do not parse: {e}")))?;
    let mut ctx = Ctx::default();
    if takes_config(&cli.command) {
        if let Some(cfg) = &m.config {
            let cfg = TrainConfig::from_canonical_json(&cfg.to_string())?;
            ctx.config_override = Some(cfg);
        }
    }
    let mut inner = Record::default();
    execute(&cli.command, &ctx, &mut inner)?;
    rec.outputs.extend(inner.outputs.iter().cloned());
    rec.config = inner.config;
    rec.seed = inner.seed;

    let mut rows = Vec::new();
    let mut mismatched = Vec::new();
    for a in &m.outputs {
        let now = Artifact::of(Path::new(&a.path)).ok();
        let same = now.as_ref().is_some_and(|n| n.sha256 == a.sha256);
        if !same {
            mismatched.push(a.path.clone());
        }
        rows.push(json!({
            "path": a.path,
            "recorded": a.sha256,
            "reproduced": now.map(|n| n.sha256),
            "match": same,
        }));
    }
    if !mismatched.is_empty() {
        return Err(Failure::Data(format!("outputs differ from the recorded run: {}", mismatched.join(", "))));
    }
    Ok(Output {
        human: format!("reproduced {} output(s) of `{}` byte for byte", rows.len(), m.command),
        result: json!({ "command": m.command, "outputs": Value::Array(rows) }),
    })
}
