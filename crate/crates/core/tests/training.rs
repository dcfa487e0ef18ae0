use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasr_core::config::{TrainConfig, Variant};
use rasr_core::corpus::{split, synth_generate, Domain, Label, SynthConfig, VideoRecord};
use rasr_core::cspr::{retrieve, AlphaWeights, MemoryBank, SemanticPrimitive};
use rasr_core::nn::init_store;
use rasr_core::numerics::{finite_diff_check, ParamStore, Tape, Tensor};
use rasr_core::training::{
    ablate, bce, contexts_for, evaluate, evaluate_with_contexts, general_run, load_checkpoint, lodo, lr_at, model_specs, noise_robustness,
    perturb_contexts, record_loss, save_checkpoint, sensitivity_sweep, total_loss, train, AdamW, Backends,
    Checkpoint, Confusion, Metrics, SampleInput, SweepParam, TrainError, FORMAT_VERSION,
};

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        ..TrainConfig::desk()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<VideoRecord> {
    synth_generate(&SynthConfig { n, seed, ..SynthConfig::default() }).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn bce_examples() {
    assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce(0.9, 0.0) - 2.302585).abs() < 1e-6);
    assert!(bce(1.0 - 1e-12, 1.0) < 1e-6);
    assert!(bce(0.0, 1.0).is_finite());
}

#[test]
fn total_loss_examples() {
    assert!((total_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-12);
    assert_eq!(total_loss(0.37, 5.0, 0.0), 0.37);
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(&cfg, 5), 2e-5);
    assert_eq!(lr_at(&cfg, 1), 2e-5 / 5.0);
    assert!(lr_at(&cfg, 50).abs() < 1e-20);
    let with_floor = TrainConfig { min_lr: 1e-6, ..cfg };
    assert!((lr_at(&with_floor, 50) - 1e-6).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_stays_between_floor_and_peak(epochs in 1usize..80, warm in 0usize..10, floor in 0.0f64..1e-3) {
        let cfg = TrainConfig { epochs, warmup_epochs: warm, lr: 1e-3, min_lr: floor, ..TrainConfig::default() };
        for e in 1..=epochs {
            let lr = lr_at(&cfg, e);
            prop_assert!(lr > 0.0 || (floor == 0.0 && e == epochs));
            prop_assert!(lr <= 1e-3 + 1e-15);
            if e > warm.min(epochs) {
                prop_assert!(lr >= floor - 1e-15);
            }
        }
    }
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::vector(vec![1.0, -2.0]));
    p.insert("idle", Tensor::vector(vec![3.0]));
    let mut tape = Tape::new();
    let vars = tape.bind(&p);
    let x = vars.get("x").unwrap();
    let s = tape.scale(x, 0.5).unwrap();
    let loss = tape.sum(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    opt.step(&mut p, &grads, 0.1);
    // m_hat = g, v_hat = g^2, so the Adam direction is g / (|g| + eps).
    let dir = 0.5 / (0.5 + 1e-8);
    let want = [1.0 - 0.1 * (dir + 0.01 * 1.0), -2.0 - 0.1 * (dir + 0.01 * -2.0)];
    for (g, w) in p.get("x").unwrap().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
    assert_eq!(p.get("idle").unwrap().data(), &[3.0]);
}

#[test]
fn confusion_example() {
    let m = Metrics::from_confusion(Confusion { tp: 40, fn_: 10, fp: 5, tn: 45 });
    assert!((m.accuracy - 0.85).abs() < 1e-12);
    assert!((m.fake.precision - 40.0 / 45.0).abs() < 1e-12);
    assert!((m.fake.recall - 0.8).abs() < 1e-12);
    assert!((m.fake.f1 - 0.8421).abs() < 5e-5);
    assert!((m.real.f1 - 0.8571).abs() < 5e-5);
    assert!((m.macro_f1 - 0.8496).abs() < 5e-5);
}

#[test]
fn perfect_predictions_and_empty_classes() {
    let labels = [Label::Fake, Label::Real, Label::Fake];
    let m = Metrics::from_predictions(&[0.9, 0.1, 0.5], &labels);
    assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    let only_real = Metrics::from_predictions(&[0.1, 0.2], &[Label::Real, Label::Real]);
    assert_eq!(only_real.fake.f1, 0.0);
    assert_eq!(only_real.real.f1, 1.0);
    assert_eq!(only_real.macro_f1, 0.5);
}

proptest! {
    #[test]
    fn metrics_recompute_from_confusion(preds in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..200)) {
        let probs: Vec<f64> = preds.iter().map(|p| p.0).collect();
        let labels: Vec<Label> = preds.iter().map(|p| if p.1 { Label::Fake } else { Label::Real }).collect();
        let m = Metrics::from_predictions(&probs, &labels);
        let again = Metrics::from_confusion(m.confusion);
        prop_assert_eq!(m.confusion.total(), preds.len() as u64);
        prop_assert!((again.accuracy - m.accuracy).abs() < 1e-12);
        prop_assert!((again.macro_f1 - m.macro_f1).abs() < 1e-12);
        prop_assert!((m.macro_f1 - 0.5 * (m.real.f1 + m.fake.f1)).abs() < 1e-12);
        for v in [m.accuracy, m.macro_f1, m.real.precision, m.real.recall, m.real.f1, m.fake.precision, m.fake.recall, m.fake.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn fd_instance(seed: u64) -> (TrainConfig, ParamStore, MemoryBank, Vec<VideoRecord>, Vec<[Vec<f64>; 3]>) {
    let cfg = TrainConfig {
        d_v: 8,
        d_t: 8,
        d_a: 4,
        d_s: 4,
        d_p: 6,
        d_h: 4,
        d_align: 3,
        d_attn: 3,
        d_c: 3,
        tokens: 2,
        k_intra: 2,
        k_cross: 2,
        hard_negatives: 2,
        tau: 0.5,
        seed,
        ..TrainConfig::desk()
    };
    let recs = synth_generate(&SynthConfig {
        n: 40,
        seed,
        dims: cfg.feature_dims(),
        ..SynthConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_store(&model_specs(&cfg).unwrap(), &mut rng);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let bank = MemoryBank::build(&recs[4..], &params, &cfg).unwrap();
    let parsing = (0..4)
        .map(|_| [0; 3].map(|_| (0..cfg.d_p).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    (cfg, params, bank, recs[..4].to_vec(), parsing)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (cfg, params, bank, recs, parsing) = fd_instance(seed);
        let samples: Vec<SampleInput> = recs.iter().zip(&parsing).map(|(record, parsing)| SampleInput { record, parsing }).collect();
        let bl = record_loss(&params, &cfg, &bank, &samples).unwrap();
        assert!(bl.align.is_some());
        let grads = bl.tape.backward(bl.loss).unwrap().into_map();
        let err = finite_diff_check(
            |p| Ok(record_loss(p, &cfg, &bank, &samples).expect("loss").value()),
            &params,
            &grads,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn zero_lambda_loss_is_exactly_the_classification_loss() {
    let (cfg, params, bank, recs, parsing) = fd_instance(7);
    let cfg = TrainConfig { lambda: 0.0, ..cfg };
    let samples: Vec<SampleInput> = recs.iter().zip(&parsing).map(|(record, parsing)| SampleInput { record, parsing }).collect();
    let bl = record_loss(&params, &cfg, &bank, &samples).unwrap();
    assert_eq!(bl.value(), bl.cls);
    assert!(bl.align.is_none());
    let mean: f64 = bl.probs.iter().zip(&recs).map(|(p, r)| bce(*p, r.label.as_f64())).sum::<f64>() / 4.0;
    assert!((bl.cls - mean).abs() < 1e-12);
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let cfg = quick_cfg();
    let recs = corpus(400, 3);
    let (tr, va, te) = split(&recs, cfg.split_ratios(), cfg.seed).unwrap();
    let b = Backends::stub(&cfg);
    let a = train(&cfg, &tr, &va, &b).unwrap();
    let again = train(&cfg, &tr, &va, &b).unwrap();
    assert_eq!(a.history.len(), cfg.epochs);
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    for (x, y) in a.history.iter().zip(&again.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.map(f64::to_bits), y.val_loss.map(f64::to_bits));
        assert_eq!(x.val_accuracy, y.val_accuracy);
    }
    let ca = Checkpoint::from_outcome(&a).to_bytes();
    assert_eq!(ca, Checkpoint::from_outcome(&again).to_bytes());
    let ea = evaluate(&a.model, &te, &b).unwrap();
    let eb = evaluate(&again.model, &te, &b).unwrap();
    assert_eq!(bits(&ea.probs), bits(&eb.probs));
    assert_eq!(ea.metrics, eb.metrics);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = quick_cfg();
    let recs = corpus(300, 4);
    let (tr, va, te) = split(&recs, cfg.split_ratios(), cfg.seed).unwrap();
    let b = Backends::stub(&cfg);
    let out = train(&cfg, &tr, &va, &b).unwrap();
    let ckpt = Checkpoint::from_outcome(&out);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.rng.restore().get_word_pos(), out.rng.word_pos);

    let before = evaluate(&out.model, &te, &b).unwrap();
    let after = evaluate(&loaded.model(), &te, &b).unwrap();
    assert_eq!(bits(&before.probs), bits(&after.probs));
    assert_eq!(before.metrics, after.metrics);
    assert!(!dir.path().join("model.tmp").exists());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 1, ..TrainConfig::desk() };
    let recs = corpus(120, 5);
    let b = Backends::stub(&cfg);
    let out = train(&cfg, &recs, &[], &b).unwrap();
    let ckpt = Checkpoint::from_outcome(&out);
    let bytes = ckpt.to_bytes();

    let truncated = &bytes[..bytes.len() - 17];
    let e = Checkpoint::from_bytes(truncated).unwrap_err();
    assert!(matches!(&e, TrainError::Checkpoint(m) if m.contains("checksum")), "{e}");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&flipped).is_err());

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let e = Checkpoint::from_bytes(&versioned).unwrap_err();
    assert!(e.to_string().contains("version"), "{e}");

    assert!(Checkpoint::from_bytes(b"NOPE").is_err());

    let mut wrong = ckpt.clone();
    wrong.config.d_h += 1;
    let e = Checkpoint::from_bytes(&wrong.to_bytes()).unwrap_err();
    assert!(e.to_string().contains("shape"), "{e}");
}

#[test]
fn no_alignment_is_bitwise_a_zero_lambda_run() {
    let cfg = quick_cfg();
    let recs = corpus(300, 6);
    let b = Backends::stub(&cfg);
    let ablated = ablate(&cfg, &recs, Variant::NoAlignment, &b).unwrap();
    let zero = general_run(&TrainConfig { lambda: 0.0, ..cfg.clone() }, &recs, &b).unwrap();
    assert_eq!(bits(&ablated.test.probs), bits(&zero.test.probs));
    assert_eq!(ablated.test.metrics, zero.test.metrics);
    for (x, y) in ablated.outcome.history.iter().zip(&zero.outcome.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
    }
}

#[test]
fn ablations_switch_off_their_stage() {
    let cfg = quick_cfg();
    let recs = corpus(200, 7);
    let b = Backends::stub(&cfg);
    let nr = ablate(&cfg, &recs, Variant::NoRetrieval, &b).unwrap();
    assert!(nr.test.contexts.iter().all(|c| c.is_empty()));
    let nm = ablate(&cfg, &recs, Variant::NoReasoning, &b).unwrap();
    assert!(nm.test.reports.reports.iter().all(Option::is_none));
    assert!(nm.test.reports.parsing.iter().flatten().flatten().all(|&v| v == 0.0));
    let nd = ablate(&cfg, &recs, Variant::NoDomainGuide, &b).unwrap();
    let texts: Vec<&str> = nd.test.reports.reports.iter().flatten().flatten().map(|r| r.text.as_str()).collect();
    assert!(!texts.is_empty() && texts.iter().all(|t| !t.contains("coverage")));
    let full = general_run(&cfg, &recs, &b).unwrap();
    assert!(full.test.reports.reports.iter().flatten().flatten().any(|r| r.text.contains("coverage")));
}

#[test]
fn lodo_keeps_the_target_domain_out() {
    let cfg = quick_cfg();
    let recs = corpus(300, 8);
    let b = Backends::stub(&cfg);
    let run = lodo(&cfg, &recs, Domain::Health, &b).unwrap();
    let n_target = recs.iter().filter(|r| r.domain == Domain::Health).count();
    assert_eq!(run.test_size, n_target);
    assert_eq!(run.train_size, recs.len() - n_target);
    assert!(run.outcome.model.bank.entries().iter().all(|e| e.domain != Domain::Health));
    assert!(run.outcome.history.iter().all(|h| h.val_loss.is_none()));
    // Contexts of target records can only be cross-domain.
    assert!(run.test.contexts.iter().flat_map(|c| &c.items).all(|it| it.domain != Domain::Health));
}

#[test]
fn robustness_at_zero_is_plain_evaluation() {
    let cfg = quick_cfg();
    let recs = corpus(300, 9);
    let (tr, va, te) = split(&recs, cfg.split_ratios(), cfg.seed).unwrap();
    let b = Backends::stub(&cfg);
    let model = train(&cfg, &tr, &va, &b).unwrap().model;
    let plain = evaluate(&model, &te, &b).unwrap();
    let curve = noise_robustness(&model, &te, &[0.0, 0.1, 0.2, 0.3, 0.5, 1.0], 1, &b).unwrap();
    assert_eq!(curve.len(), 6);
    assert_eq!(curve[0].metrics, plain.metrics);
    assert!(noise_robustness(&model, &te, &[1.5], 1, &b).is_err());

    // Fully random contexts reach the reports and from there the predictions.
    let refs: Vec<&VideoRecord> = te.iter().collect();
    let (prims, ctx) = contexts_for(&model.params, &cfg, &model.bank, &refs).unwrap();
    let pairs: Vec<(&VideoRecord, &SemanticPrimitive)> = refs.iter().copied().zip(&prims).collect();
    let alpha = AlphaWeights::from_logits(cfg.alpha_logits());
    let noisy = perturb_contexts(&ctx, &pairs, &model.bank, &alpha, 1.0, 1).unwrap();
    let shaken = evaluate_with_contexts(&model, &te, noisy, &b).unwrap();
    assert_ne!(bits(&shaken.probs), bits(&plain.probs));
}

#[test]
fn perturbation_replaces_the_declared_count() {
    let cfg = quick_cfg();
    let recs = corpus(200, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_store(&model_specs(&cfg).unwrap(), &mut rng);
    let bank = MemoryBank::build(&recs[20..], &params, &cfg).unwrap();
    let queries: Vec<&VideoRecord> = recs[..20].iter().chain(&recs[20..40]).collect();
    let (prims, ctx) = contexts_for(&params, &cfg, &bank, &queries).unwrap();
    let pairs: Vec<(&VideoRecord, &SemanticPrimitive)> = queries.iter().copied().zip(&prims).collect();
    let alpha = AlphaWeights::from_logits(cfg.alpha_logits());
    for (r, want) in [(0.1, 1), (0.2, 2), (0.3, 3), (0.5, 4), (1.0, 8)] {
        let noisy = perturb_contexts(&ctx, &pairs, &bank, &alpha, r, 42).unwrap();
        for ((orig, new), (q, _)) in ctx.iter().zip(&noisy).zip(&pairs) {
            assert_eq!(orig.len(), 8);
            assert_eq!(new.len(), 8);
            assert!(new.items.iter().all(|it| it.id != q.id));
            assert!(new.items.windows(2).all(|w| w[0].score >= w[1].score));
            let kept = new.items.iter().filter(|it| orig.items.iter().any(|o| o.id == it.id)).count();
            assert!(kept >= 8 - want, "ratio {r}: kept {kept}");
        }
    }
    let same = perturb_contexts(&ctx, &pairs, &bank, &alpha, 0.0, 42).unwrap();
    assert_eq!(same, ctx);
    // Scores of replacements follow the aggregate similarity.
    let q = &pairs[0];
    let direct = retrieve(&bank, q.1, q.0.domain, Some(&q.0.id), cfg.k_intra, cfg.k_cross, &alpha);
    assert_eq!(direct, ctx[0]);
}

#[test]
fn sweep_rows_and_degenerate_single_value() {
    let cfg = TrainConfig { epochs: 2, warmup_epochs: 1, ..TrainConfig::desk() };
    let recs = corpus(200, 11);
    let b = Backends::stub(&cfg);
    let rows = sensitivity_sweep(&cfg, &recs, SweepParam::K, &[2.0, 4.0, 8.0, 16.0, 32.0], &b).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), [2.0, 4.0, 8.0, 16.0, 32.0]);
    assert!(rows.iter().all(|r| r.param == "k"));

    let single = sensitivity_sweep(&cfg, &recs, SweepParam::Tau, &[0.07], &b).unwrap();
    let plain = general_run(&cfg, &recs, &b).unwrap();
    assert_eq!(single[0].metrics, plain.test.metrics);

    let k5 = SweepParam::K.apply(&cfg, 5.0).unwrap();
    assert_eq!((k5.k_intra, k5.k_cross), (3, 2));
    assert!(SweepParam::DS.apply(&cfg, 0.0).is_err());
    assert!(SweepParam::DS.apply(&cfg, 2.5).is_err());
    assert!(SweepParam::Tau.apply(&cfg, -0.1).is_err());
    assert!(SweepParam::Lambda.apply(&cfg, -1.0).is_err());
    assert!(sensitivity_sweep(&cfg, &recs, SweepParam::Lambda, &[], &b).is_err());
    assert!("bogus".parse::<SweepParam>().is_err());
}

#[test]
fn empty_inputs_are_errors() {
    let cfg = quick_cfg();
    let b = Backends::stub(&cfg);
    assert!(matches!(train(&cfg, &[], &[], &b), Err(TrainError::EmptyDataset(_))));
    let recs = corpus(100, 12);
    let model = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &recs, &[], &b).unwrap().model;
    assert!(matches!(evaluate(&model, &[], &b), Err(TrainError::EmptyDataset(_))));
}
