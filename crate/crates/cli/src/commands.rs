use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rasr_core::config::{TrainConfig, Variant};
use rasr_core::corpus::{load_corpus, save_corpus, split, synth_generate, Domain, Label, Modality, SynthConfig, VideoRecord};
use rasr_core::cspr::AlphaWeights;
use rasr_core::dgmp::{build_prompt, references_from};
use rasr_core::training::{
    ablate, contexts_for, evaluate, evaluate_with_contexts, general_run, load_checkpoint, lodo, noise_robustness,
    save_checkpoint, sensitivity_sweep, uses_reasoning, Backends, Checkpoint, EpochRecord, Metrics, Model, SweepParam,
};
use serde_json::{json, Value};

use crate::args::{CheckpointArgs, Command, ConfigArgs, Preset, SplitChoice};
use crate::error::Failure;
use crate::manifest::{sibling, write_atomic};

/// Keys a checkpoint command may override; everything else is fixed by the checkpoint.
const RUNTIME_KEYS: [&str; 14] = [
    "reasoning_backend",
    "embed_backend",
    "chat_model",
    "embed_model",
    "temperature",
    "top_p",
    "max_tokens",
    "concurrency",
    "http_timeout_secs",
    "http_backoff_secs",
    "audit_log",
    "reference_chars",
    "theta",
    "r_max",
];

/// What a command read, wrote and resolved, filled in as it goes.
#[derive(Debug, Default)]
pub struct Record {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: Option<Value>,
    pub seed: Option<u64>,
}

impl Record {
    fn set_config(&mut self, cfg: &TrainConfig) {
        self.config = Some(serde_json::from_str(&cfg.canonical_json()).expect("canonical json parses"));
        self.seed = Some(cfg.seed);
    }
}

#[derive(Debug, Default, Clone)]
pub struct Ctx {
    /// Replaces file/preset/`--set` resolution, used when replaying a manifest.
    pub config_override: Option<TrainConfig>,
}

/// Successful command output.
pub struct Output {
    pub result: Value,
    pub human: String,
}

pub fn execute(cmd: &Command, ctx: &Ctx, rec: &mut Record) -> Result<Output, Failure> {
    match cmd {
        Command::Validate { corpus, config } => validate(corpus, config, ctx, rec),
        Command::Synth {
            n,
            separability,
            leak,
            seed,
            fake_ratio,
            out,
        } => {
            let cfg = SynthConfig {
                n: *n,
                separability: *separability,
                leak: *leak,
                seed: *seed,
                fake_ratio: *fake_ratio,
                ..SynthConfig::default()
            };
            synth(&cfg, out, rec)
        }
        Command::Train {
            config,
            corpus,
            out,
            history,
        } => train(config, corpus, out, history.as_deref(), ctx, rec),
        Command::Eval { ckpt, split } => eval(ckpt, *split, rec),
        Command::Lodo {
            config,
            corpus,
            target,
            out,
        } => lodo_cmd(config, corpus, target, out.as_deref(), ctx, rec),
        Command::Ablate {
            config,
            corpus,
            variant,
        } => ablate_cmd(config, corpus, variant, ctx, rec),
        Command::Robustness {
            ckpt,
            ratios,
            seed,
            split,
        } => robustness(ckpt, ratios, *seed, *split, rec),
        Command::Sweep {
            config,
            corpus,
            param,
            values,
        } => sweep(config, corpus, param, values, ctx, rec),
        Command::Retrieve { ckpt, id } => retrieve_cmd(ckpt, id, rec),
        Command::Report { ckpt, id } => report_cmd(ckpt, id, rec),
        Command::Replay { recorded } => crate::replay(recorded, rec),
    }
}

fn split_kv(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))
}

pub fn resolve_config(args: &ConfigArgs, ctx: &Ctx, rec: &mut Record) -> Result<TrainConfig, Failure> {
    if let Some(cfg) = &ctx.config_override {
        rec.set_config(cfg);
        return Ok(cfg.clone());
    }
    let base = match args.preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let mut cfg = match &args.config {
        Some(path) => {
            rec.inputs.push(path.clone());
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::parse_flat(&text, base).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    for o in &args.overrides {
        let (k, v) = split_kv(o)?;
        cfg.set(k, v).map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
    }
    cfg.validate()?;
    rec.set_config(&cfg);
    Ok(cfg)
}

fn load(path: &Path, cfg: &TrainConfig, rec: &mut Record) -> Result<Vec<VideoRecord>, Failure> {
    rec.inputs.push(path.to_path_buf());
    Ok(load_corpus(path, &cfg.feature_dims())?)
}

struct Loaded {
    model: Model,
    records: Vec<VideoRecord>,
    backends: Backends,
}

fn open_checkpoint(args: &CheckpointArgs, rec: &mut Record) -> Result<Loaded, Failure> {
    rec.inputs.push(args.checkpoint.clone());
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut model = ckpt.model();
    for o in &args.overrides {
        let (k, v) = split_kv(o)?;
        if !RUNTIME_KEYS.contains(&k) {
            return Err(Failure::Usage(format!(
                "--set {k}: fixed by the checkpoint; allowed keys are {}",
                RUNTIME_KEYS.join(", ")
            )));
        }
        model.cfg.set(k, v).map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
    }
    model.cfg.validate()?;
    rec.set_config(&model.cfg);
    let records = load(&args.corpus, &model.cfg, rec)?;
    let backends = Backends::from_config(&model.cfg)?;
    Ok(Loaded {
        model,
        records,
        backends,
    })
}

fn select(records: Vec<VideoRecord>, cfg: &TrainConfig, which: SplitChoice) -> Result<Vec<VideoRecord>, Failure> {
    if which == SplitChoice::All {
        return Ok(records);
    }
    let (tr, va, te) = split(&records, cfg.split_ratios(), cfg.seed)?;
    Ok(match which {
        SplitChoice::Train => tr,
        SplitChoice::Val => va,
        _ => te,
    })
}

fn split_name(s: SplitChoice) -> &'static str {
    match s {
        SplitChoice::All => "all",
        SplitChoice::Train => "train",
        SplitChoice::Val => "val",
        SplitChoice::Test => "test",
    }
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "accuracy {:.4}  macro-F1 {:.4}  (n={})",
        m.accuracy,
        m.macro_f1,
        m.confusion.total()
    )
}

fn label_str(l: Label) -> &'static str {
    match l {
        Label::Real => "real",
        Label::Fake => "fake",
    }
}

fn find<'a>(records: &'a [VideoRecord], id: &str) -> Result<&'a VideoRecord, Failure> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Failure::Data(format!("no record with id `{id}` in the corpus")))
}

fn save_history(path: &Path, history: &[EpochRecord]) -> Result<(), Failure> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h).expect("history serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn validate(corpus: &Path, args: &ConfigArgs, ctx: &Ctx, rec: &mut Record) -> Result<Output, Failure> {
    let cfg = resolve_config(args, ctx, rec)?;
    let records = load(corpus, &cfg, rec)?;
    let mut domains: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for r in &records {
        domains.entry(r.domain.as_str()).or_default()[r.label.as_u8() as usize] += 1;
    }
    let fake = records.iter().filter(|r| r.label == Label::Fake).count();
    let with_reports = records
        .iter()
        .filter(|r| r.reports.as_ref().is_some_and(|x| x.is_complete()))
        .count();
    let dims = cfg.feature_dims();
    Ok(Output {
        result: json!({
            "records": records.len(),
            "fake": fake,
            "real": records.len() - fake,
            "with_reports": with_reports,
            "dims": dims,
            "domains": domains.iter().map(|(d, c)| (d.to_string(), json!({"real": c[0], "fake": c[1]}))).collect::<serde_json::Map<_, _>>(),
        }),
        human: format!(
            "{}: {} records valid ({} fake, {} real, {} domains, {} with stored reports)",
            corpus.display(),
            records.len(),
            fake,
            records.len() - fake,
            domains.len(),
            with_reports
        ),
    })
}

fn synth(cfg: &SynthConfig, out: &Path, rec: &mut Record) -> Result<Output, Failure> {
    rec.seed = Some(cfg.seed);
    rec.config = Some(json!({
        "n": cfg.n,
        "separability": cfg.separability,
        "leak": cfg.leak,
        "seed": cfg.seed,
        "fake_ratio": cfg.fake_ratio,
        "dims": cfg.dims,
        "latent_dim": cfg.latent_dim,
        "noise": cfg.noise,
        "shift": cfg.shift,
    }));
    let records = synth_generate(cfg)?;
    save_corpus(out, &records)?;
    rec.outputs.push(out.to_path_buf());
    let fake = records.iter().filter(|r| r.label == Label::Fake).count();
    Ok(Output {
        result: json!({"out": out.display().to_string(), "records": records.len(), "fake": fake}),
        human: format!("wrote {} records ({} fake) to {}", records.len(), fake, out.display()),
    })
}

fn train(
    args: &ConfigArgs,
    corpus: &Path,
    out: &Path,
    history: Option<&Path>,
    ctx: &Ctx,
    rec: &mut Record,
) -> Result<Output, Failure> {
    let cfg = resolve_config(args, ctx, rec)?;
    let records = load(corpus, &cfg, rec)?;
    let backends = Backends::from_config(&cfg)?;
    let run = general_run(&cfg, &records, &backends)?;
    save_checkpoint(out, &Checkpoint::from_outcome(&run.outcome))?;
    rec.outputs.push(out.to_path_buf());
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".history.jsonl"));
    save_history(&history_path, &run.outcome.history)?;
    rec.outputs.push(history_path.clone());
    let epochs = run.outcome.history.len();
    let last_loss = run.outcome.history.last().map(|h| h.train_loss);
    Ok(Output {
        result: json!({
            "checkpoint": out.display().to_string(),
            "history": history_path.display().to_string(),
            "epochs": epochs,
            "final_train_loss": last_loss,
            "test_size": run.test_records.len(),
            "test": run.test.metrics,
        }),
        human: format!(
            "trained {epochs} epochs; test {}\ncheckpoint: {}\nhistory: {}",
            metrics_line(&run.test.metrics),
            out.display(),
            history_path.display()
        ),
    })
}

fn eval(args: &CheckpointArgs, which: SplitChoice, rec: &mut Record) -> Result<Output, Failure> {
    let l = open_checkpoint(args, rec)?;
    let records = select(l.records, &l.model.cfg, which)?;
    let ev = evaluate(&l.model, &records, &l.backends)?;
    Ok(Output {
        result: json!({
            "split": split_name(which),
            "size": records.len(),
            "loss": ev.loss,
            "report_failures": ev.reports.failures,
            "metrics": ev.metrics,
        }),
        human: format!("{} split: {}  loss {:.4}", split_name(which), metrics_line(&ev.metrics), ev.loss),
    })
}

fn lodo_cmd(
    args: &ConfigArgs,
    corpus: &Path,
    target: &str,
    out: Option<&Path>,
    ctx: &Ctx,
    rec: &mut Record,
) -> Result<Output, Failure> {
    let target: Domain = target.parse().map_err(|e| {
        Failure::Usage(format!(
            "{e}; expected one of {}",
            Domain::ALL.map(|d| d.as_str()).join(", ")
        ))
    })?;
    let cfg = resolve_config(args, ctx, rec)?;
    let records = load(corpus, &cfg, rec)?;
    let backends = Backends::from_config(&cfg)?;
    let run = lodo(&cfg, &records, target, &backends)?;
    if let Some(out) = out {
        save_checkpoint(out, &Checkpoint::from_outcome(&run.outcome))?;
        rec.outputs.push(out.to_path_buf());
    }
    Ok(Output {
        result: json!({
            "target": target.as_str(),
            "train_size": run.train_size,
            "test_size": run.test_size,
            "metrics": run.test.metrics,
            "history": run.outcome.history,
        }),
        human: format!(
            "held out {} ({} test, {} train): {}",
            target.as_str(),
            run.test_size,
            run.train_size,
            metrics_line(&run.test.metrics)
        ),
    })
}

fn ablate_cmd(args: &ConfigArgs, corpus: &Path, variant: &str, ctx: &Ctx, rec: &mut Record) -> Result<Output, Failure> {
    let variants: Vec<Variant> = if variant == "all" {
        std::iter::once(Variant::Full).chain(Variant::ABLATIONS).collect()
    } else {
        vec![variant.parse().map_err(Failure::Usage)?]
    };
    let cfg = resolve_config(args, ctx, rec)?;
    let records = load(corpus, &cfg, rec)?;
    let backends = Backends::from_config(&cfg)?;
    let mut rows = Vec::new();
    let mut human = String::new();
    for v in variants {
        let run = ablate(&cfg, &records, v, &backends)?;
        human.push_str(&format!("{:<24} {}\n", v.display_name(), metrics_line(&run.test.metrics)));
        rows.push(json!({"variant": v.as_str(), "name": v.display_name(), "metrics": run.test.metrics}));
    }
    Ok(Output {
        result: json!({ "rows": rows }),
        human: human.trim_end().to_string(),
    })
}

fn robustness(
    args: &CheckpointArgs,
    ratios: &[f64],
    seed: Option<u64>,
    which: SplitChoice,
    rec: &mut Record,
) -> Result<Output, Failure> {
    let l = open_checkpoint(args, rec)?;
    let seed = seed.unwrap_or(l.model.cfg.seed);
    rec.seed = Some(seed);
    let records = select(l.records, &l.model.cfg, which)?;
    let points = noise_robustness(&l.model, &records, ratios, seed, &l.backends)?;
    let human = points
        .iter()
        .map(|p| format!("noise {:.2}: {}", p.ratio, metrics_line(&p.metrics)))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Output {
        result: json!({ "split": split_name(which), "seed": seed, "points": points }),
        human,
    })
}

fn sweep(
    args: &ConfigArgs,
    corpus: &Path,
    param: &str,
    values: &[f64],
    ctx: &Ctx,
    rec: &mut Record,
) -> Result<Output, Failure> {
    let param: SweepParam = param.parse().map_err(Failure::Usage)?;
    let cfg = resolve_config(args, ctx, rec)?;
    let records = load(corpus, &cfg, rec)?;
    let backends = Backends::from_config(&cfg)?;
    let rows = sensitivity_sweep(&cfg, &records, param, values, &backends)?;
    let human = rows
        .iter()
        .map(|r| format!("{} = {}: {}", r.param, r.value, metrics_line(&r.metrics)))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Output {
        result: json!({ "param": param.as_str(), "rows": rows }),
        human,
    })
}

fn retrieve_cmd(args: &CheckpointArgs, id: &str, rec: &mut Record) -> Result<Output, Failure> {
    let l = open_checkpoint(args, rec)?;
    let r = find(&l.records, id)?;
    let cfg = &l.model.cfg;
    let (_, ctx) = contexts_for(&l.model.params, cfg, &l.model.bank, &[r])?;
    let ctx = &ctx[0];
    let alpha = AlphaWeights::from_logits(cfg.alpha_logits()).weights();
    let mut human = format!(
        "{} ({}, {}): {} intra + {} cross\n",
        r.id,
        r.domain.as_str(),
        label_str(r.label),
        ctx.intra_count,
        ctx.cross_count
    );
    for (i, it) in ctx.items.iter().enumerate() {
        human.push_str(&format!(
            "{:>3}  {:+.6}  {:<20} {:<14} {:<5} {:?}\n",
            i + 1,
            it.score,
            it.id,
            it.domain.as_str(),
            label_str(it.label),
            it.scope
        ));
    }
    Ok(Output {
        result: json!({
            "id": r.id,
            "domain": r.domain.as_str(),
            "label": label_str(r.label),
            "variant": cfg.variant.as_str(),
            "alpha": alpha,
            "context": ctx,
        }),
        human: human.trim_end().to_string(),
    })
}

fn report_cmd(args: &CheckpointArgs, id: &str, rec: &mut Record) -> Result<Output, Failure> {
    let l = open_checkpoint(args, rec)?;
    let r = find(&l.records, id)?;
    let cfg = &l.model.cfg;
    let bank = &l.model.bank;
    let (_, contexts) = contexts_for(&l.model.params, cfg, bank, &[r])?;
    let refs = references_from(&contexts[0], bank);
    let guided = cfg.variant != Variant::NoDomainGuide;
    // Stored reports would be reused as-is; clearing them forces fresh generation.
    let mut fresh = r.clone();
    fresh.reports = None;
    let ev = evaluate_with_contexts(&l.model, std::slice::from_ref(&fresh), contexts.clone(), &l.backends)?;
    let generated = ev.reports.reports[0].as_ref();
    let mut modalities = serde_json::Map::new();
    let mut human = format!(
        "{} ({}, {}): P(fake) = {:.4}\n",
        r.id,
        r.domain.as_str(),
        label_str(r.label),
        ev.probs[0]
    );
    if !uses_reasoning(cfg) {
        human.push_str("variant has no reasoning stage; no reports\n");
    }
    for m in Modality::ALL {
        let prompt = build_prompt(m, guided.then_some(r.domain), &refs, cfg.reference_chars);
        let rep = generated.map(|g| &g[m.index()]);
        let stored = r.reports.as_ref().and_then(|s| s.get(m));
        if let Some(rep) = rep {
            human.push_str(&format!(
                "\n[{}] confidence {:.4}{} after {} attempt(s)\n--- prompt ---\n{}\n--- report ---\n{}\n",
                m.key(),
                rep.confidence,
                if rep.low_confidence { " (low)" } else { "" },
                rep.attempts,
                prompt,
                rep.text
            ));
        }
        modalities.insert(
            m.key().to_string(),
            json!({
                "prompt": prompt,
                "report": rep.map(|x| &x.text),
                "confidence": rep.map(|x| x.confidence),
                "low_confidence": rep.map(|x| x.low_confidence),
                "attempts": rep.map(|x| x.attempts),
                "failed": rep.map(|x| x.is_sentinel()),
                "stored": stored,
            }),
        );
    }
    Ok(Output {
        result: json!({
            "id": r.id,
            "domain": r.domain.as_str(),
            "label": label_str(r.label),
            "variant": cfg.variant.as_str(),
            "prob_fake": ev.probs[0],
            "references": contexts[0].items.iter().map(|it| &it.id).collect::<Vec<_>>(),
            "modalities": modalities,
        }),
        human: human.trim_end().to_string(),
    })
}
