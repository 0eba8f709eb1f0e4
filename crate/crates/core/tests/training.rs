//! Alternating optimization, telemetry and checkpoints on tiny runs.

use seqmask::data::synthetic_shapes;
use seqmask::models::MaskSet;
use seqmask::training::{
    load_checkpoint, pretrain_on, save_checkpoint, telemetry_line, MaskingMode, TrainConfig, Trainer,
};
use seqmask::Error;
use seqmask_autograd::Tensor;

fn micro_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::from_toml_str(
        r#"
        n_masks = 2
        epochs = 2
        warmup_epochs = 1
        batch_size = 8
        seed = 7
        [dataset]
        count = 16
        test_count = 8
        classes = 2
        [encoder]
        width = 2
        projection_dim = 8
        input_size = 32
        [masker]
        base_channels = 2
        depth = 2
        "#,
    )
    .unwrap();
    cfg.probe.epochs = 2;
    cfg
}

fn views(cfg: &TrainConfig, n: usize) -> (Tensor<f32>, Tensor<f32>, seqmask::data::Dataset) {
    let ds = synthetic_shapes(cfg.dataset.seed, cfg.dataset.count, cfg.encoder.input_size, cfg.dataset.classes).unwrap();
    let t = Trainer::new(cfg.clone(), ds.len()).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    let (a, b) = t.views(&ds, &idx, 0);
    (a, b, ds)
}

#[test]
fn two_steps_give_two_finite_records() {
    let cfg = micro_cfg();
    let (xa, xb, ds) = views(&cfg, 8);
    let mut t = Trainer::new(cfg, ds.len()).unwrap();
    let r0 = t.train_step(&xa, &xb).unwrap();
    let r1 = t.train_step(&xa, &xb).unwrap();
    assert_eq!((r0.step, r1.step), (0, 1));
    for r in [&r0, &r1] {
        assert!(r.is_finite());
        assert!(r.breakdown.budget >= 0.0 && r.breakdown.overlap >= 0.0 && r.breakdown.consistency >= 0.0);
        assert!((0.0..=1.0).contains(&r.mask_mean));
    }
    // lr is zero at the first warmup step
    assert_eq!(r0.lr_encoder, 0.0);
    assert!(r1.lr_encoder > 0.0 && r1.lr_masker > 0.0);
    assert_eq!(t.encoder().step, 2);
    assert_eq!(t.masker().step, 2);
}

#[test]
fn telemetry_fields_are_fixed() {
    let cfg = micro_cfg();
    let (xa, xb, ds) = views(&cfg, 8);
    let mut t = Trainer::new(cfg, ds.len()).unwrap();
    let line = telemetry_line(&t.train_step(&xa, &xb).unwrap());
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = vec![
        "step",
        "contrastive",
        "budget",
        "overlap",
        "consistency",
        "adversary_objective",
        "encoder_objective",
        "mask_mean",
        "mask_pairwise_overlap",
        "lr_encoder",
        "lr_masker",
    ];
    let mut got = keys.clone();
    got.sort_unstable();
    want.sort_unstable();
    assert_eq!(got, want);
    let adv = v["contrastive"].as_f64().unwrap()
        - TrainConfig::default().budget_weight * v["budget"].as_f64().unwrap()
        - TrainConfig::default().overlap_weight * v["overlap"].as_f64().unwrap()
        - TrainConfig::default().consistency_weight * v["consistency"].as_f64().unwrap();
    assert!((adv - v["adversary_objective"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn frozen_masker_emits_identical_masks() {
    let mut cfg = micro_cfg();
    cfg.masker_lr = 0.0;
    let (xa, xb, ds) = views(&cfg, 8);
    let mut t = Trainer::new(cfg, ds.len()).unwrap();
    let before = t.masker().generate_mask_sequence(&xb).unwrap();
    for _ in 0..3 {
        let r = t.train_step(&xa, &xb).unwrap();
        assert_eq!(r.lr_masker, 0.0);
    }
    let after = t.masker().generate_mask_sequence(&xb).unwrap();
    assert_eq!(before, after);
    assert_eq!(t.masker().step, 0);
    assert_eq!(t.encoder().step, 3);
}

#[test]
fn zero_masks_reduce_to_plain_simclr() {
    let mut cfg = micro_cfg();
    cfg.n_masks = 1;
    cfg.masker_lr = 0.0;
    cfg.budget_weight = 0.0;
    cfg.overlap_weight = 0.0;
    cfg.consistency_weight = 0.0;
    let (xa, xb, ds) = views(&cfg, 8);
    let zeros = MaskSet::new(vec![Tensor::zeros([8, 32, 32])]).unwrap();
    let mut masked = Trainer::new(cfg.clone(), ds.len()).unwrap();
    let mut none_cfg = cfg.clone();
    none_cfg.masking = MaskingMode::None;
    let mut plain = Trainer::new(none_cfg, ds.len()).unwrap();
    for _ in 0..4 {
        let a = masked.train_step_with_masks(&xa, &xb, &zeros).unwrap();
        let b = plain.train_step(&xa, &xb).unwrap();
        assert!((a.breakdown.encoder_objective - b.breakdown.encoder_objective).abs() < 1e-6);
        assert_eq!(b.breakdown.budget, 0.0);
        assert_eq!(b.breakdown.overlap, 0.0);
        assert_eq!(b.breakdown.consistency, 0.0);
        assert_eq!((b.mask_mean, b.mask_pairwise_overlap, b.lr_masker), (0.0, 0.0, 0.0));
    }
    assert!(masked
        .encoder()
        .params()
        .params()
        .iter()
        .zip(plain.encoder().params().params())
        .all(|((_, x), (_, y))| x.max_abs_diff(y) < 1e-5));
}

#[test]
fn random_masking_meets_the_budget_exactly() {
    let mut cfg = micro_cfg();
    cfg.masking = MaskingMode::Random;
    let (xa, xb, ds) = views(&cfg, 8);
    let mut t = Trainer::new(cfg, ds.len()).unwrap();
    let r = t.train_step(&xa, &xb).unwrap();
    assert!((r.mask_mean - 256.0 / 1024.0).abs() < 1e-12);
    assert_eq!(r.breakdown.budget, 0.0);
    assert_eq!(r.lr_masker, 0.0);
}

#[test]
fn identical_seeds_give_identical_telemetry() {
    let cfg = micro_cfg();
    let ds = synthetic_shapes(1, 16, 32, 2).unwrap();
    let run = || {
        let mut lines = Vec::new();
        pretrain_on(&cfg, &ds, |r| lines.push(telemetry_line(r))).unwrap();
        lines
    };
    let a = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, run());
    let mut other = cfg.clone();
    other.seed += 1;
    let mut lines = Vec::new();
    pretrain_on(&other, &ds, |r| lines.push(telemetry_line(r))).unwrap();
    assert_ne!(a, lines);
}

#[test]
fn encoder_objective_tracks_contrastive_mean() {
    let cfg = micro_cfg();
    let ds = synthetic_shapes(2, 16, 32, 2).unwrap();
    let (_, _, recs) = pretrain_on(&cfg, &ds, |_| {}).unwrap();
    for r in recs {
        assert_eq!(r.breakdown.encoder_objective, r.breakdown.contrastive);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = micro_cfg();
    let ds = synthetic_shapes(3, 16, 32, 2).unwrap();
    let mut t = Trainer::new(cfg.clone(), ds.len()).unwrap();
    t.run(&ds, |_| {}).unwrap();
    let step = t.step();
    let (enc, masker) = t.into_states();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &cfg, &enc, &masker, step).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, step);
    assert_eq!(ck.config, cfg);
    assert!(ck.encoder.params().bitwise_eq(enc.params()));
    assert!(ck.masker.params().bitwise_eq(masker.params()));
    assert_eq!((ck.encoder.step, ck.masker.step), (enc.step, masker.step));
    ck.ensure_config(&cfg).unwrap();

    // a second save/load cycle keeps every tensor bit for bit
    let again = dir.path().join("again.safetensors");
    save_checkpoint(&again, &ck.config, &ck.encoder, &ck.masker, ck.step).unwrap();
    let ck2 = load_checkpoint(&again).unwrap();
    assert!(ck2.encoder.params().bitwise_eq(enc.params()));
    assert!(ck2.masker.params().bitwise_eq(masker.params()));
}

#[test]
fn checkpoint_failures_are_typed() {
    let cfg = micro_cfg();
    let t = Trainer::new(cfg.clone(), 16).unwrap();
    let (enc, masker) = t.into_states();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &cfg, &enc, &masker, 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.safetensors");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(Error::CorruptCheckpoint { .. })));

    let missing = dir.path().join("missing.safetensors");
    assert!(matches!(load_checkpoint(&missing), Err(Error::Io { .. })));

    let replace = |from: &str, to: &str| {
        assert_eq!(from.len(), to.len());
        let at = bytes
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern present in header");
        let mut out = bytes.clone();
        out[at..at + from.len()].copy_from_slice(to.as_bytes());
        out
    };
    let versioned = dir.path().join("v9.safetensors");
    std::fs::write(&versioned, replace("\"format_version\":\"1\"", "\"format_version\":\"9\"")).unwrap();
    assert!(matches!(load_checkpoint(&versioned), Err(Error::VersionMismatch { .. })));

    let hash = cfg.hash();
    let mut flipped = hash.clone();
    flipped.replace_range(0..1, if hash.starts_with('0') { "1" } else { "0" });
    let tampered = dir.path().join("hash.safetensors");
    std::fs::write(&tampered, replace(&hash, &flipped)).unwrap();
    assert!(matches!(load_checkpoint(&tampered), Err(Error::HashMismatch { .. })));

    let ck = load_checkpoint(&path).unwrap();
    let mut other = cfg.clone();
    other.epochs += 1;
    assert!(matches!(ck.ensure_config(&other), Err(Error::HashMismatch { .. })));
}

#[test]
fn batches_cover_the_dataset_without_repeats() {
    let t = Trainer::new(micro_cfg(), 20).unwrap();
    let batches = t.epoch_batches(0, 20);
    assert_eq!(batches.len(), 2);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 16);
    assert_ne!(t.epoch_batches(0, 20), t.epoch_batches(1, 20));
    assert_eq!(t.epoch_batches(1, 20), t.epoch_batches(1, 20));
}
