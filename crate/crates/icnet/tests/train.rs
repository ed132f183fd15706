//! Training behavior: determinism, BN folding equivalence, checkpoint
//! round-trips, and overfitting sanity on a two-image set.

use icnet::arch::{build_icnet, FusionKind, IcnetConfig, MacCounter};
use icnet::data::{Dataset, SceneSpec};
use icnet::error::{CheckpointError, Error};
use icnet::tensor::{Shape, Tensor};
use icnet::train::{load_checkpoint, save_checkpoint, train_loop, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> IcnetConfig {
    IcnetConfig {
        num_classes: 5,
        input_h: 32,
        input_w: 32,
        widths: vec![4, 6, 8, 8, 8],
        cff_channels: 8,
        pyramid_bins: vec![1, 2],
        ..Default::default()
    }
}

fn tiny_train_cfg(iters: usize) -> TrainConfig {
    TrainConfig {
        max_iter: iters,
        batch: 2,
        crop: 32,
        seed: 11,
        ..Default::default()
    }
}

fn tiny_dataset(count: usize) -> Dataset<f32> {
    Dataset::synthetic(
        &SceneSpec { height: 32, width: 32, num_classes: 5, ..Default::default() },
        count,
    )
    .unwrap()
}

#[test]
fn zero_iterations_leave_the_model_bitwise_unchanged() {
    let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let before = m.params_flat();
    let ds = tiny_dataset(2);
    let log = train_loop(&mut m, &ds, &tiny_train_cfg(0), |_, _| {}).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.params_flat(), before);
}

#[test]
fn equal_seeds_give_bitwise_identical_checkpoints() {
    let ds = tiny_dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for run in 0..2 {
        let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
        train_loop(&mut m, &ds, &tiny_train_cfg(12), |_, _| {}).unwrap();
        let path = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&path, &m, 12).unwrap();
        paths.push(path);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_seeds_give_identical_loss_logs() {
    let ds = tiny_dataset(4);
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
        let log = train_loop(&mut m, &ds, &tiny_train_cfg(8), |_, _| {}).unwrap();
        logs.push(log.iter().map(|r| r.loss).collect::<Vec<_>>());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn overfitting_two_images_halves_the_final_head_loss() {
    let ds = tiny_dataset(2);
    let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let cfg = TrainConfig {
        max_iter: 300,
        batch: 2,
        crop: 32,
        seed: 5,
        // Keep the sample geometry fixed so the loss trajectory is a clean
        // overfitting curve.
        resize_min: 1.0,
        resize_max: 1.0,
        mirror_prob: 0.0,
        ..Default::default()
    };
    let log = train_loop(&mut m, &ds, &cfg, |_, _| {}).unwrap();
    let first = log[0].loss4;
    let last = log.last().unwrap().loss4;
    assert!(
        last <= 0.5 * first,
        "loss4 went from {first} to {last}, less than 50% reduction"
    );
}

#[test]
fn merged_bn_model_matches_unmerged_inference() {
    for fusion in [FusionKind::Cff, FusionKind::Deconv(3)] {
        let mut cfg = tiny_cfg();
        cfg.fusion = fusion;
        let mut m = build_icnet::<f32>(&cfg, 7).unwrap();
        // Populate running statistics with a few training passes.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let img = Tensor::from_fn(Shape::new(2, 3, 32, 32), |_, _, _, _| rng.gen_range(0.0..1.0f32));
            m.forward_train(&img, &mut MacCounter::off()).unwrap();
        }
        let merged = m.merged_bn();
        let mut worst = 0.0f32;
        for _ in 0..100 {
            let img = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, _, _, _| rng.gen_range(0.0..1.0f32));
            let a = m.forward_infer(&img, false, &mut MacCounter::off()).unwrap();
            let b = merged.forward_infer(&img, false, &mut MacCounter::off()).unwrap();
            for (x, y) in a.logits4.iter().zip(b.logits4.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-6, "fusion {fusion:?}: max abs deviation {worst}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let ds = tiny_dataset(2);
    let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    train_loop(&mut m, &ds, &tiny_train_cfg(4), |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, 4).unwrap();

    let mut fresh = build_icnet::<f32>(&tiny_cfg(), 99).unwrap();
    let iteration = load_checkpoint(&path, &mut fresh).unwrap();
    assert_eq!(iteration, 4);
    assert_eq!(fresh.params_flat(), m.params_flat());

    // Running statistics round-trip too.
    let mut a = Vec::new();
    m.visit_params(&mut |_, _, t| a.extend_from_slice(t.data()));
    let mut b = Vec::new();
    fresh.visit_params(&mut |_, _, t| b.extend_from_slice(t.data()));
    assert_eq!(a, b);
}

#[test]
fn corrupting_one_byte_is_a_crc_error() {
    let m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, 0).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();

    let mut fresh = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let before = fresh.params_flat();
    match load_checkpoint(&path, &mut fresh) {
        Err(Error::Checkpoint(CheckpointError::Crc { .. })) => {}
        other => panic!("expected CRC error, got {other:?}"),
    }
    // No partial model: parameters untouched.
    assert_eq!(fresh.params_flat(), before);
}

#[test]
fn config_hash_mismatch_reports_both_hashes() {
    let m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, 0).unwrap();

    let mut other_cfg = tiny_cfg();
    other_cfg.cff_channels = 16;
    let mut other = build_icnet::<f32>(&other_cfg, 3).unwrap();
    match load_checkpoint(&path, &mut other) {
        Err(Error::Checkpoint(CheckpointError::ConfigHash { expected, found })) => {
            assert_ne!(expected, found);
            let msg = CheckpointError::ConfigHash { expected, found }.to_string();
            assert!(msg.contains(&format!("{found:#018x}")), "{msg}");
            assert!(msg.contains(&format!("{expected:#018x}")), "{msg}");
        }
        other => panic!("expected config hash error, got {other:?}"),
    }
}

#[test]
fn truncated_and_bad_magic_files_are_distinct_errors() {
    let m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Truncation invalidates the CRC framing.
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    let mut fresh = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    match load_checkpoint(&path, &mut fresh) {
        Err(Error::Checkpoint(CheckpointError::Crc { .. } | CheckpointError::Truncated { .. })) => {}
        other => panic!("expected truncation/crc error, got {other:?}"),
    }

    // Bad magic with a recomputed CRC is specifically a magic error.
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let body_len = bad.len() - 4;
    let crc = crc32fast::hash(&bad[..body_len]);
    bad[body_len..].copy_from_slice(&crc.to_le_bytes());
    std::fs::write(&path, bad).unwrap();
    match load_checkpoint(&path, &mut fresh) {
        Err(Error::Checkpoint(CheckpointError::BadMagic { .. })) => {}
        other => panic!("expected magic error, got {other:?}"),
    }
}

#[test]
fn non_finite_loss_aborts_training() {
    let ds = tiny_dataset(2);
    let mut m = build_icnet::<f32>(&tiny_cfg(), 3).unwrap();
    // A divergent learning rate reliably produces a non-finite loss.
    let cfg = TrainConfig {
        max_iter: 200,
        batch: 2,
        crop: 32,
        base_lr: 1e6,
        seed: 1,
        ..Default::default()
    };
    match train_loop(&mut m, &ds, &cfg, |_, _| {}) {
        Err(Error::Numeric(_)) => {}
        other => panic!("expected numeric abort, got {other:?}"),
    }
}
