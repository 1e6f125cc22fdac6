//! Training-engine integration tests: determinism, resume, logging cadence,
//! and degenerate-input contracts. All runs use a miniature model so the
//! whole file stays fast.

use std::path::Path;

use fundus_dwm::cli::read_log;
use fundus_dwm::config::AppConfig;
use fundus_dwm::data::{make_synthetic, DatasetManifest};
use fundus_dwm::engine::{evaluate, load_checkpoint, train, Checkpoint};
use fundus_dwm::error::Error;
use fundus_dwm::network::ModelConfig;

fn tiny_config() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.model = ModelConfig::desk_default(64);
    cfg.model.backbone.stage_channels = [4, 8, 12, 16];
    cfg.model.backbone.cbam_reduction = 2;
    cfg.model.backbone.cbam_spatial_kernel = 3;
    cfg.imaging.roi_side = 64;
    cfg.train.batch_size = 4;
    cfg.train.max_epochs = 2;
    cfg.train.log_every = 1;
    cfg.train.seed = 11;
    cfg.augment.blur_sigma_range = (0.0, 0.0);
    cfg
}

fn tiny_dataset(dir: &Path, n: usize) -> DatasetManifest {
    make_synthetic(dir, n, 5, 64).unwrap()
}

#[test]
fn lr_zero_leaves_parameters_at_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let mut cfg = tiny_config();
    cfg.train.lr = 0.0;
    cfg.train.max_epochs = 1;

    let out = train(&cfg, &data, None, &dir.path().join("run"), None).unwrap();
    let ckpt = load_checkpoint(&out.final_checkpoint).unwrap();
    let init = fundus_dwm::network::init_model_params(&cfg.model, cfg.train.seed).unwrap();
    for i in 0..init.len() {
        let drift: f64 = init
            .value_at(i)
            .iter()
            .zip(ckpt.params.value_at(i).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(drift, 0.0, "{} drifted {drift}", init.name_at(i));
    }
}

#[test]
fn log_lines_are_json_with_exact_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let mut cfg = tiny_config();
    cfg.train.log_every = 2;
    cfg.train.max_epochs = 3; // 2 batches/epoch -> 6 iterations -> 3 lines

    let out = train(&cfg, &data, None, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.iterations, 6);
    let records = read_log(&dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    let iters: Vec<u64> = records.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![2, 4, 6]);
    assert!(records.windows(2).all(|w| w[0].iteration < w[1].iteration));
    for r in &records {
        assert!(r.loss.is_finite());
        assert_eq!(r.lr, cfg.train.lr);
    }
}

#[test]
fn snapshots_follow_their_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let val = tiny_dataset(&dir.path().join("val"), 4);
    let mut cfg = tiny_config();
    cfg.train.snapshot_every = 3;
    cfg.train.max_epochs = 4; // 8 iterations -> snapshots at 3 and 6

    let run = dir.path().join("run");
    train(&cfg, &data, Some(&val), &run, None).unwrap();
    assert!(run.join("val_snapshot_00000003.json").exists());
    assert!(run.join("val_snapshot_00000006.json").exists());
    assert!(!run.join("val_snapshot_00000004.json").exists());
    let text = std::fs::read_to_string(run.join("val_snapshot_00000003.json")).unwrap();
    let report: fundus_dwm::metrics::MetricsReport = serde_json::from_str(&text).unwrap();
    assert!(report.acc >= 0.0 && report.acc <= 1.0);
}

#[test]
fn fixed_seed_reproduces_the_loss_sequence_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let cfg = tiny_config();

    train(&cfg, &data, None, &dir.path().join("a"), None).unwrap();
    train(&cfg, &data, None, &dir.path().join("b"), None).unwrap();
    let a = std::fs::read(dir.path().join("a/train_log.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/train_log.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "loss logs differ between identical runs");
}

#[test]
fn parallel_batches_match_deterministic_mode_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let mut cfg = tiny_config();

    cfg.train.deterministic = true;
    train(&cfg, &data, None, &dir.path().join("serial"), None).unwrap();
    cfg.train.deterministic = false;
    train(&cfg, &data, None, &dir.path().join("parallel"), None).unwrap();

    let a = load_checkpoint(&dir.path().join("serial/checkpoint_final.ckpt")).unwrap();
    let b = load_checkpoint(&dir.path().join("parallel/checkpoint_final.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
}

fn params_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    (0..a.params.len()).all(|i| {
        a.params
            .value_at(i)
            .iter()
            .zip(b.params.value_at(i).iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[test]
fn resume_matches_uninterrupted_training_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);

    // Uninterrupted: 6 iterations (3 epochs x 2 batches).
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 3;
    let full = train(&cfg, &data, None, &dir.path().join("full"), None).unwrap();
    assert_eq!(full.iterations, 6);

    // Interrupted mid-epoch via the iteration cap, then resumed.
    let mut cfg_a = tiny_config();
    cfg_a.train.max_iterations = Some(3);
    cfg_a.train.max_epochs = 3;
    let part = train(&cfg_a, &data, None, &dir.path().join("part"), None).unwrap();
    assert_eq!(part.iterations, 3);

    let mid = load_checkpoint(&part.final_checkpoint).unwrap();
    let mut cfg_b = tiny_config();
    cfg_b.train.max_iterations = None;
    cfg_b.train.max_epochs = 3;
    let resumed = train(&cfg_b, &data, None, &dir.path().join("part"), Some(mid)).unwrap();
    assert_eq!(resumed.iterations, 6);

    let a = load_checkpoint(&full.final_checkpoint).unwrap();
    let b = load_checkpoint(&resumed.final_checkpoint).unwrap();
    assert!(params_equal(&a, &b), "resumed parameters differ from uninterrupted run");
    assert_eq!(a.adam, b.adam);

    // The stitched log equals the uninterrupted one.
    let log_full = read_log(&dir.path().join("full/train_log.jsonl")).unwrap();
    let log_part = read_log(&dir.path().join("part/train_log.jsonl")).unwrap();
    assert_eq!(log_full, log_part);
}

#[test]
fn single_class_training_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let only_pos = DatasetManifest::new(
        data.records.iter().filter(|r| r.label == 1).cloned().collect(),
    )
    .unwrap();
    let cfg = tiny_config();
    match train(&cfg, &only_pos, None, &dir.path().join("run"), None) {
        Err(Error::Validation(msg)) => assert!(msg.contains("both classes"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn class_weighting_keeps_the_zero_update_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    // Unbalanced set: weights differ from 1 but lr = 0 still freezes params.
    let data = tiny_dataset(&dir.path().join("data"), 12);
    let skewed = DatasetManifest::new(
        data.records
            .iter()
            .filter(|r| r.label == 0)
            .chain(data.records.iter().filter(|r| r.label == 1).take(2))
            .cloned()
            .collect(),
    )
    .unwrap();
    let mut cfg = tiny_config();
    cfg.train.class_weighting = true;
    cfg.train.lr = 0.0;
    cfg.train.max_epochs = 1;
    let out = train(&cfg, &skewed, None, &dir.path().join("run"), None).unwrap();
    let ckpt = load_checkpoint(&out.final_checkpoint).unwrap();
    let init = fundus_dwm::network::init_model_params(&cfg.model, cfg.train.seed).unwrap();
    for i in 0..init.len() {
        let drift: f64 = init
            .value_at(i)
            .iter()
            .zip(ckpt.params.value_at(i).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(drift, 0.0);
    }
}

#[test]
fn evaluate_is_deterministic_and_handles_degenerate_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 6);
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 1;
    let out = train(&cfg, &data, None, &dir.path().join("run"), None).unwrap();
    let ckpt = load_checkpoint(&out.final_checkpoint).unwrap();

    let a = evaluate(&ckpt, &data).unwrap();
    let b = evaluate(&ckpt, &data).unwrap();
    assert_eq!(a, b);

    // Zero fusion weights force constant scores; with both classes present
    // the tie convention still defines AUC = 0.5.
    let mut flat = ckpt.clone();
    for name in ["fusion.cls.w", "fusion.cls.b"] {
        let i = flat.params.index_of(name).unwrap();
        flat.params.value_at_mut(i).fill(0.0);
    }
    // Also silence the residual path into the classifier.
    for name in ["fusion.wo", "fusion.wo.b"] {
        let i = flat.params.index_of(name).unwrap();
        flat.params.value_at_mut(i).fill(0.0);
    }
    let r = evaluate(&flat, &data).unwrap();
    assert_eq!(r.auc, Some(0.5));
    assert_eq!(r.acc, 0.5);

    // A single-class evaluation set has no defined AUC: null plus a warning.
    let single = DatasetManifest::new(
        data.records.iter().filter(|r| r.label == 0).cloned().collect(),
    )
    .unwrap();
    let r = evaluate(&ckpt, &single).unwrap();
    assert_eq!(r.auc, None);
    assert!(!r.warnings.is_empty());
}

#[test]
fn missing_roi_falls_back_to_centered_crop() {
    use fundus_dwm::engine::preprocess_sample;

    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 2);
    let mut record = data.records[0].clone();
    record.roi = None;
    let mut imaging = tiny_config().imaging;
    imaging.fallback_crop_fraction = 0.6;
    let (full, roi) = preprocess_sample(&record, &imaging, 48).unwrap();
    assert_eq!((full.height(), full.width()), (48, 48));
    assert_eq!((roi.height(), roi.width()), (48, 48));

    // The fallback differs from the labeled ROI crop but training still runs.
    let (_, roi_boxed) = preprocess_sample(&data.records[0], &imaging, 48).unwrap();
    assert_ne!(roi.data(), roi_boxed.data());

    let stripped = DatasetManifest::new(
        data.records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.roi = None;
                r
            })
            .collect(),
    )
    .unwrap();
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 1;
    train(&cfg, &stripped, None, &dir.path().join("run"), None).unwrap();
}

#[test]
fn checkpoints_are_written_on_their_epoch_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"), 8);
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 4;
    cfg.train.checkpoint_every_epochs = 2;
    let run = dir.path().join("run");
    train(&cfg, &data, None, &run, None).unwrap();
    assert!(run.join("checkpoint_epoch0002.ckpt").exists());
    assert!(run.join("checkpoint_epoch0004.ckpt").exists());
    assert!(!run.join("checkpoint_epoch0003.ckpt").exists());
    assert!(run.join("checkpoint_final.ckpt").exists());
}
