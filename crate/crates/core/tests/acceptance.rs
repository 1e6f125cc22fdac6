//! Acceptance suite. Each test covers one release criterion at its stated
//! tolerance and prints one `ACCEPTANCE <name>: PASS` line; assertion
//! failures mark the criterion failed.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use fundus_dwm::autodiff::{NodeId, Tape};
use fundus_dwm::config::AppConfig;
use fundus_dwm::data::{make_synthetic, split_records};
use fundus_dwm::dwm::{propose_windows, total_score_map, window_bounds, window_rate, DwmScaleConfig};
use fundus_dwm::engine::{evaluate, load_checkpoint, predict_scores, train};
use fundus_dwm::metrics::{average_precision, roc_auc};
use fundus_dwm::network::{FeatureMap, ModelConfig};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// 1. DWM argmax oracle
// ---------------------------------------------------------------------------

/// Exhaustive window-sum argmax with row-major tie-break.
fn brute_force_argmax(fmap: &FeatureMap, k: usize) -> (usize, usize) {
    let (c, h, w) = fmap.data().dim();
    let mut best = (0usize, 0usize);
    let mut best_sum = f64::NEG_INFINITY;
    for oy in 0..h - k + 1 {
        for ox in 0..w - k + 1 {
            let mut sum = 0.0;
            for ch in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        sum += fmap.data()[[ch, oy + dy, ox + dx]];
                    }
                }
            }
            if sum > best_sum {
                best_sum = sum;
                best = (oy, ox);
            }
        }
    }
    best
}

#[test]
fn acceptance_dwm_argmax_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD3);
    let channel_choices = [1usize, 4, 8];
    for case in 0..500 {
        let h = rng.random_range(3..=12);
        let w = rng.random_range(3..=12);
        let c = channel_choices[rng.random_range(0..3)];
        let k = rng.random_range(1..=3usize.min(h.min(w)));
        // Dyadic values keep both score routes exact so ties are well defined.
        let fmap = FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| {
            rng.random_range(0..=8u32) as f64 / 8.0
        }))
        .unwrap();

        let scale = DwmScaleConfig { kernel: k, patch_h: 8, patch_w: 8, proposals: 1 };
        let props = propose_windows(&fmap, &[scale], (64, 64), 3).unwrap();
        let (by, bx) = brute_force_argmax(&fmap, k);
        let score = total_score_map(&fmap, k).unwrap();
        let expect = window_rate((by, bx), (h, w), (score.height(), score.width())).unwrap();
        assert_eq!(
            (props[0].rate_h, props[0].rate_w),
            expect,
            "case {case}: top-1 mismatch (c={c} h={h} w={w} k={k})"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10s");
    println!("ACCEPTANCE dwm-argmax-oracle: PASS (500 instances, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// 2. Rate / corner spot values
// ---------------------------------------------------------------------------

#[test]
fn acceptance_rate_and_corner_spot_values() {
    let start = Instant::now();
    assert_eq!(window_rate((0, 0), (7, 7), (5, 5)).unwrap(), (3.0 / 14.0, 3.0 / 14.0));
    assert_eq!(window_rate((2, 2), (7, 7), (5, 5)).unwrap(), (0.5, 0.5));
    assert_eq!(
        window_bounds((0.5, 0.5), (448, 448), (224, 224)).unwrap(),
        (112, 112, 336, 336)
    );
    let odd = window_bounds((0.5, 0.5), (448, 448), (113, 113)).unwrap();
    assert_eq!(odd.2 - odd.0, 113);
    assert_eq!(odd, (168, 168, 281, 281));
    let clamped = window_bounds((3.0 / 14.0, 3.0 / 14.0), (448, 448), (224, 224)).unwrap();
    assert_eq!(clamped, (0, 0, 224, 224));
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1);
    println!("ACCEPTANCE rate-corner-spot-values: PASS ({elapsed:?})");
}

// ---------------------------------------------------------------------------
// 3. Patch geometry fuzz
// ---------------------------------------------------------------------------

#[test]
fn acceptance_patch_geometry_fuzz() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF2);
    for _ in 0..1000 {
        let h = rng.random_range(8..800);
        let w = rng.random_range(8..800);
        let ph = rng.random_range(1..=h);
        let pw = rng.random_range(1..=w);
        let rate = (rng.random::<f64>(), rng.random::<f64>());
        let (ty, tx, by, bx) = window_bounds(rate, (h, w), (ph, pw)).unwrap();
        assert_eq!(by - ty, ph, "height mismatch");
        assert_eq!(bx - tx, pw, "width mismatch");
        assert!(by <= h && bx <= w, "out of bounds");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 5);
    println!("ACCEPTANCE patch-geometry-fuzz: PASS (1000 triples, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// 4. CBAM + fusion gradient check
// ---------------------------------------------------------------------------

/// Checks every input coordinate of a scalar tape graph against central
/// finite differences; returns (checked, within_tolerance).
fn fd_sweep(
    inputs: &[ArrayD<f64>],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> (usize, usize) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let eval = |vals: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let r = build(&mut t, &ids);
        t.scalar(r)
    };

    let h = 1e-5;
    let mut checked = 0;
    let mut ok = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).expect("missing gradient");
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            checked += 1;
            if (a - fd).abs() / denom <= 1e-3 {
                ok += 1;
            }
        }
    }
    (checked, ok)
}

#[test]
fn acceptance_cbam_fusion_gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xCB);
    let mut rand_arr = |shape: &[usize]| -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    };

    // CBAM block on a 2x4x4 map: input, channel MLP, spatial kernel + bias.
    let cbam_inputs = vec![
        rand_arr(&[2, 4, 4]), // feature map
        rand_arr(&[1, 2]),    // reduce (C/r x C), r = 2
        rand_arr(&[2, 1]),    // expand
        rand_arr(&[1, 2, 3, 3]),
        rand_arr(&[1]),
    ];
    let cbam_proj = rand_arr(&[2, 4, 4]);
    let cbam_build = move |t: &mut Tape, ids: &[NodeId]| -> NodeId {
        let nodes = fundus_dwm::attention::CbamNodes {
            reduce_w: ids[1],
            expand_w: ids[2],
            spatial_w: ids[3],
            spatial_b: ids[4],
        };
        let out = fundus_dwm::attention::cbam_forward_tape(t, ids[0], &nodes);
        t.weighted_sum(out, cbam_proj.clone())
    };
    let (cbam_checked, cbam_ok) = fd_sweep(&cbam_inputs, &cbam_build);

    // Multi-head attention readout on 4 tokens of dim 8, 2 heads, plus the
    // classifier, ending in a weighted cross-entropy.
    let dim = 8;
    let fusion_inputs: Vec<ArrayD<f64>> = {
        let mut v = Vec::new();
        for _ in 0..4 {
            v.push(rand_arr(&[dim]));
        }
        for _ in 0..4 {
            v.push(rand_arr(&[dim, dim])); // wq wk wv wo
            v.push(rand_arr(&[dim]));
        }
        v.push(rand_arr(&[2, dim])); // classifier
        v.push(rand_arr(&[2]));
        v
    };
    let fusion_build = |t: &mut Tape, ids: &[NodeId]| -> NodeId {
        let tokens = t.stack_rows(&ids[0..4]);
        let heads = 2;
        let head_dim = dim / heads;
        let q = t.linear_rows(tokens, ids[4], ids[5]);
        let k = t.linear_rows(tokens, ids[6], ids[7]);
        let v = t.linear_rows(tokens, ids[8], ids[9]);
        let mut outs = Vec::new();
        for hh in 0..heads {
            let (from, to) = (hh * head_dim, (hh + 1) * head_dim);
            let qh = t.slice_cols(q, from, to);
            let kh = t.slice_cols(k, from, to);
            let vh = t.slice_cols(v, from, to);
            let scores = t.matmul_nt(qh, kh);
            let scaled = t.scale_const(scores, 1.0 / (head_dim as f64).sqrt());
            let attn = t.softmax_rows(scaled);
            outs.push(t.matmul_nn(attn, vh));
        }
        let merged = t.concat_cols(&outs);
        let proj = t.linear_rows(merged, ids[10], ids[11]);
        let residual = t.add(tokens, proj);
        let pooled = t.mean_rows(residual);
        let logits = t.linear_vec(pooled, ids[12], ids[13]);
        t.cross_entropy(logits, 1, 1.3)
    };
    let (fusion_checked, fusion_ok) = fd_sweep(&fusion_inputs, &fusion_build);

    let checked = cbam_checked + fusion_checked;
    let ok = cbam_ok + fusion_ok;
    let frac = ok as f64 / checked as f64;
    let elapsed = start.elapsed();
    assert!(
        frac >= 0.99,
        "only {ok}/{checked} coordinates within 1e-3 relative error"
    );
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 60s");
    println!(
        "ACCEPTANCE cbam-fusion-gradient-check: PASS ({ok}/{checked} coords within 1e-3, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// 5. Metric oracles
// ---------------------------------------------------------------------------

fn concordance(labels: &[u8], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn ap_step_sum(labels: &[u8], scores: &[f64]) -> f64 {
    let mut items: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    // Pessimistic order: positives after negatives at equal scores.
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let mut hits = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (k, &(_, l)) in items.iter().enumerate() {
        if l == 1 {
            hits += 1.0;
            let recall = hits / pos;
            ap += (recall - prev_recall) * (hits / (k + 1) as f64);
            prev_recall = recall;
        }
    }
    ap
}

#[test]
fn acceptance_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3C);

    let mut auc_cases = 0;
    while auc_cases < 200 {
        let n = rng.random_range(2..=50);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..12u32) as f64 / 12.0)
            .collect();
        let auc = roc_auc(&labels, &scores).unwrap();
        let oracle = concordance(&labels, &scores);
        assert!((auc - oracle).abs() < 1e-12, "auc {auc} vs concordance {oracle}");
        auc_cases += 1;
    }

    let mut ap_cases = 0;
    while ap_cases < 200 {
        let n = rng.random_range(1..=50);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if !labels.contains(&1) {
            continue;
        }
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..10u32) as f64 / 10.0)
            .collect();
        let ap = average_precision(&labels, &scores).unwrap();
        let oracle = ap_step_sum(&labels, &scores);
        assert!((ap - oracle).abs() < 1e-12, "ap {ap} vs step sum {oracle}");
        ap_cases += 1;
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10);
    println!("ACCEPTANCE metric-oracles: PASS (200 + 200 instances, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// 6. End-to-end desk run
// ---------------------------------------------------------------------------

fn desk_config() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.model = ModelConfig::desk_default(128);
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = 14;
    cfg.train.stop_at_train_accuracy = Some(1.0);
    cfg.train.seed = 7;
    cfg.augment.jitter_strength = 0.1;
    cfg.augment.blur_sigma_range = (0.0, 0.0);
    cfg
}

#[test]
fn acceptance_end_to_end_desk_run() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic(&dir.path().join("data"), 512, 7, 299).unwrap();
    let cfg = desk_config();
    let (train_set, val_set, test_set) = split_records(&manifest, cfg.data.split, 7).unwrap();

    let out = train(&cfg, &train_set, Some(&val_set), &dir.path().join("run"), None).unwrap();
    assert!(out.epochs_completed <= 30, "used {} epochs", out.epochs_completed);
    let ckpt = load_checkpoint(&out.final_checkpoint).unwrap();
    let report = evaluate(&ckpt, &test_set).unwrap();

    let auc = report.auc.expect("auc defined on a two-class test set");
    let elapsed = start.elapsed();
    assert!(auc >= 0.85, "held-out AUC {auc} < 0.85");
    assert!(report.acc >= 0.80, "held-out accuracy {} < 0.80", report.acc);
    assert!(elapsed.as_secs() <= 600, "took {elapsed:?}, budget 10 min");
    println!(
        "ACCEPTANCE end-to-end-desk-run: PASS (auc {auc:.4}, acc {:.4}, {} epochs, {elapsed:?})",
        report.acc, out.epochs_completed
    );
}

// ---------------------------------------------------------------------------
// 7. Overfit sanity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_overfit_sanity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic(&dir.path().join("data"), 64, 3, 299).unwrap();

    let mut cfg = AppConfig::default();
    cfg.model = ModelConfig::desk_default(96);
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = 300;
    cfg.train.stop_at_train_accuracy = Some(1.0);
    cfg.train.augment_enabled = false;
    cfg.train.seed = 3;
    cfg.train.log_every = 1;

    let run_dir = dir.path().join("run");
    let out = train(&cfg, &manifest, None, &run_dir, None).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(out.train_accuracy, 1.0, "training accuracy stuck at {}", out.train_accuracy);
    assert!(out.epochs_completed <= 300);
    assert!(elapsed.as_secs() <= 180, "took {elapsed:?}, budget 3 min");

    // The loss also has to come down, not just the decision boundary.
    let log = fundus_dwm::cli::read_log(&run_dir.join("train_log.jsonl")).unwrap();
    let epoch_mean = |e: u64| -> f64 {
        let losses: Vec<f64> =
            log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let first = epoch_mean(0);
    let last = epoch_mean(out.epochs_completed - 1);
    assert!(last < first, "mean loss did not decrease: {first} -> {last}");

    println!(
        "ACCEPTANCE overfit-sanity: PASS (accuracy 1.0 after {} epochs, loss {first:.4} -> {last:.4}, {elapsed:?})",
        out.epochs_completed
    );
}

// ---------------------------------------------------------------------------
// 8. Determinism & resume
// ---------------------------------------------------------------------------

#[test]
fn acceptance_determinism_and_resume() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic(&dir.path().join("data"), 8, 5, 64).unwrap();

    let mut cfg = AppConfig::default();
    cfg.model = ModelConfig::desk_default(64);
    cfg.model.backbone.stage_channels = [4, 8, 12, 16];
    cfg.model.backbone.cbam_reduction = 2;
    cfg.model.backbone.cbam_spatial_kernel = 3;
    cfg.imaging.roi_side = 64;
    cfg.train.batch_size = 4;
    cfg.train.max_epochs = 3;
    cfg.train.log_every = 1;
    cfg.augment.blur_sigma_range = (0.0, 0.0);

    // Identical seeds reproduce the logged loss sequence exactly.
    train(&cfg, &manifest, None, &dir.path().join("a"), None).unwrap();
    train(&cfg, &manifest, None, &dir.path().join("b"), None).unwrap();
    let log_a = std::fs::read(dir.path().join("a/train_log.jsonl")).unwrap();
    let log_b = std::fs::read(dir.path().join("b/train_log.jsonl")).unwrap();
    assert!(!log_a.is_empty());
    assert_eq!(log_a, log_b, "loss sequences differ across identical runs");

    // Checkpoint-resume equals uninterrupted training bitwise.
    let mut cfg_short = cfg.clone();
    cfg_short.train.max_iterations = Some(3);
    let part = train(&cfg_short, &manifest, None, &dir.path().join("c"), None).unwrap();
    let mid = load_checkpoint(&part.final_checkpoint).unwrap();
    let mut cfg_rest = cfg.clone();
    cfg_rest.train.max_iterations = None;
    let resumed = train(&cfg_rest, &manifest, None, &dir.path().join("c"), Some(mid)).unwrap();

    let full = load_checkpoint(&dir.path().join("a/checkpoint_final.ckpt")).unwrap();
    let stitched = load_checkpoint(&resumed.final_checkpoint).unwrap();
    for i in 0..full.params.len() {
        let equal = full
            .params
            .value_at(i)
            .iter()
            .zip(stitched.params.value_at(i).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(equal, "parameter {} differs after resume", full.params.name_at(i));
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() <= 120, "took {elapsed:?}, budget 2 min");
    println!("ACCEPTANCE determinism-and-resume: PASS ({elapsed:?})");
}

// ---------------------------------------------------------------------------
// 9. Ablation direction (soft check: reported, not asserted)
// ---------------------------------------------------------------------------

#[test]
fn acceptance_ablation_direction_reported() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic(&dir.path().join("data"), 160, 13, 299).unwrap();

    let mut cfg3 = AppConfig::default();
    cfg3.model = ModelConfig::desk_default(96);
    cfg3.train.batch_size = 8;
    cfg3.train.max_epochs = 8;
    cfg3.train.stop_at_train_accuracy = Some(1.0);
    cfg3.train.seed = 13;
    cfg3.augment.blur_sigma_range = (0.0, 0.0);

    // Two-branch ablation: no DWM scales, global + ROI tokens only.
    let mut cfg2 = cfg3.clone();
    cfg2.model.dwm_scales.clear();
    cfg2.model.fusion.token_count = 2;

    let (train_set, val_set, test_set) = split_records(&manifest, cfg3.data.split, 13).unwrap();
    let mut aucs = Vec::new();
    for (name, cfg) in [("3-branch", &cfg3), ("2-branch", &cfg2)] {
        let out = train(cfg, &train_set, Some(&val_set), &dir.path().join(name), None).unwrap();
        let ckpt = load_checkpoint(&out.final_checkpoint).unwrap();
        let scores = predict_scores(&ckpt, &test_set).unwrap();
        let labels: Vec<u8> = test_set.records.iter().map(|r| r.label).collect();
        aucs.push(roc_auc(&labels, &scores).unwrap());
    }

    let (auc3, auc2) = (aucs[0], aucs[1]);
    let held = auc3 >= auc2 - 0.02;
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE ablation-direction: REPORTED (3-branch auc {auc3:.4} vs 2-branch auc {auc2:.4}; \
         ordering within 0.02 tolerance: {held}; {elapsed:?})"
    );
}
