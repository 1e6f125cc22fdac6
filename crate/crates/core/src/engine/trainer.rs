//! The training loop and evaluation pipeline.
//!
//! Determinism contract: with a fixed seed, every RNG stream is derived from
//! (seed, epoch, sample index), batches are reduced in sample order, and the
//! per-epoch shuffle depends only on (seed, epoch). Runs are bit-identical
//! whether samples execute serially (`deterministic = true`) or on a thread
//! pool, and resuming from a checkpoint continues the exact trajectory.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, AdamState, Checkpoint};
use super::optimizer::Adam;
use crate::config::{AppConfig, ImagingConfig};
use crate::data::{derive_seed, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{clahe, crop_roi, load_image, resize_bilinear, AugmentDraw, ImageTensor, RoiBox};
use crate::metrics::{metrics_summary, MetricsReport};
use crate::network::Model;

/// One training log line (JSON-lines format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub epochs_completed: u64,
    pub iterations: u64,
    /// Training accuracy over the last (possibly partial) epoch.
    pub train_accuracy: f64,
    pub artifacts: Vec<PathBuf>,
}

/// Preprocessed sample cached as quantized bytes.
struct CachedSample {
    full: Vec<u8>,
    roi: Vec<u8>,
    label: u8,
    side: usize,
}

impl CachedSample {
    fn tensors(&self) -> (ImageTensor, ImageTensor) {
        (tensor_from_u8(&self.full, self.side), tensor_from_u8(&self.roi, self.side))
    }
}

fn tensor_to_u8(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn tensor_from_u8(bytes: &[u8], side: usize) -> ImageTensor {
    let data = Array3::from_shape_vec(
        (3, side, side),
        bytes.iter().map(|b| *b as f64 / 255.0).collect(),
    )
    .unwrap();
    ImageTensor::from_valid(data)
}

/// The Fig.-3 style input pipeline for one record: the full image resized to
/// the model input, and the ROI crop → `roi_side` → CLAHE → model input.
pub fn preprocess_sample(
    record: &SampleRecord,
    imaging: &ImagingConfig,
    input_side: usize,
) -> Result<(ImageTensor, ImageTensor)> {
    let img = load_image(&record.image_path)?;
    let full = resize_bilinear(&img, input_side, input_side)?;
    let roi800 = roi_clahe(&img, record.roi.as_ref(), imaging)?;
    let roi = resize_bilinear(&roi800, input_side, input_side)?;
    Ok((full, roi))
}

/// ROI crop resized to `roi_side` with CLAHE applied (the preprocessing
/// artifact written by the `prep` command).
pub fn roi_clahe(
    img: &ImageTensor,
    roi: Option<&RoiBox>,
    imaging: &ImagingConfig,
) -> Result<ImageTensor> {
    let box_ = match roi {
        Some(b) => *b,
        None => fallback_box(img.width(), img.height(), imaging.fallback_crop_fraction),
    };
    let crop = crop_roi(img, &box_, imaging.roi_side)?;
    clahe(&crop, imaging.clahe_clip, imaging.clahe_grid)
}

/// Centered crop covering `fraction` of each side.
fn fallback_box(width: usize, height: usize, fraction: f64) -> RoiBox {
    let w = ((width as f64 * fraction).round() as usize).clamp(1, width);
    let h = ((height as f64 * fraction).round() as usize).clamp(1, height);
    let x0 = (width - w) / 2;
    let y0 = (height - h) / 2;
    RoiBox::new(x0, y0, x0 + w, y0 + h)
}

fn build_cache(
    manifest: &DatasetManifest,
    imaging: &ImagingConfig,
    input_side: usize,
    parallel: bool,
) -> Result<Vec<CachedSample>> {
    let prep = |r: &SampleRecord| -> Result<CachedSample> {
        let (full, roi) = preprocess_sample(r, imaging, input_side)?;
        Ok(CachedSample {
            full: tensor_to_u8(&full),
            roi: tensor_to_u8(&roi),
            label: r.label,
            side: input_side,
        })
    };
    if parallel {
        manifest.records.par_iter().map(prep).collect()
    } else {
        manifest.records.iter().map(prep).collect()
    }
}

fn class_weights(manifest: &DatasetManifest, enabled: bool) -> [f64; 2] {
    if !enabled {
        return [1.0, 1.0];
    }
    let (neg, pos) = manifest.class_counts();
    let n = (neg + pos) as f64;
    [n / (2.0 * neg as f64), n / (2.0 * pos as f64)]
}

struct BatchResult {
    loss: f64,
    grads: Vec<ArrayD<f64>>,
    correct: usize,
}

/// (weighted loss, per-parameter grads, prediction correct, class weight).
type SampleOutcome = (f64, Vec<Option<ArrayD<f64>>>, bool, f64);

fn batch_step(
    model: &Model,
    cache: &[CachedSample],
    batch: &[usize],
    cfg: &AppConfig,
    seed: u64,
    epoch: u64,
    weights: [f64; 2],
) -> Result<BatchResult> {
    let run_one = |&idx: &usize| -> Result<SampleOutcome> {
        let sample = &cache[idx];
        let (mut full, mut roi) = sample.tensors();
        if cfg.train.augment_enabled {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, epoch), idx as u64));
            let draw = AugmentDraw::sample(&cfg.augment, &mut rng);
            full = draw.apply(&full);
            roi = draw.apply(&roi);
        }
        let w = weights[sample.label as usize];
        let out = model.loss_grads(&full, &roi, sample.label, w, None)?;
        let predicted = if out.logits[1] > out.logits[0] { 1 } else { 0 };
        Ok((out.loss, out.grads, predicted == sample.label, w))
    };

    let results: Vec<SampleOutcome> = if cfg.train.deterministic {
        batch.iter().map(run_one).collect::<Result<_>>()?
    } else {
        batch.par_iter().map(run_one).collect::<Result<_>>()?
    };

    // Reduce in sample order so the sum is identical under both schedulers.
    let mut grads: Vec<ArrayD<f64>> = (0..model.store.len())
        .map(|i| ArrayD::zeros(model.store.value_at(i).raw_dim()))
        .collect();
    let mut loss = 0.0;
    let mut weight_sum = 0.0;
    let mut correct = 0usize;
    for (sample_loss, sample_grads, ok, w) in results {
        loss += sample_loss;
        weight_sum += w;
        correct += ok as usize;
        for (acc, g) in grads.iter_mut().zip(sample_grads) {
            if let Some(g) = g {
                *acc += &g;
            }
        }
    }
    let inv = 1.0 / weight_sum;
    for g in grads.iter_mut() {
        g.mapv_inplace(|v| v * inv);
    }
    Ok(BatchResult { loss: loss * inv, grads, correct })
}

/// Trains the three-branch model, writing logs, snapshots, and checkpoints
/// under `out_dir`. Pass `resume` to continue a previous run; duration limits
/// (`max_epochs`, `max_iterations`) are taken from `cfg`, everything else
/// from the checkpoint so the trajectory is preserved.
pub fn train(
    cfg: &AppConfig,
    train_set: &DatasetManifest,
    val_set: Option<&DatasetManifest>,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let (neg, pos) = train_set.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::validation(
            "training set must contain both classes",
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let resuming = resume.is_some();
    let (run_cfg, mut model, mut adam, mut epoch, mut iteration, seed) = match resume {
        Some(ckpt) => {
            let mut run_cfg = ckpt.config.clone();
            run_cfg.train.max_epochs = cfg.train.max_epochs;
            run_cfg.train.max_iterations = cfg.train.max_iterations;
            run_cfg.train.stop_at_train_accuracy = cfg.train.stop_at_train_accuracy;
            let model = Model::from_parts(ckpt.config.model.clone(), ckpt.params)?;
            let adam = Adam { m: ckpt.adam.m, v: ckpt.adam.v, t: ckpt.adam.t };
            (run_cfg, model, adam, ckpt.epoch, ckpt.iteration, ckpt.rng_seed)
        }
        None => {
            let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
            let adam = Adam::new(&model.store);
            (cfg.clone(), model, adam, 0, 0, cfg.train.seed)
        }
    };
    let tcfg = run_cfg.train.clone();

    let input_side = run_cfg.model.backbone.input_side;
    let cache = build_cache(train_set, &run_cfg.imaging, input_side, !tcfg.deterministic)?;
    let val_cache = match val_set {
        Some(v) if !v.is_empty() => {
            Some((build_cache(v, &run_cfg.imaging, input_side, !tcfg.deterministic)?, v.clone()))
        }
        _ => None,
    };
    let weights = class_weights(train_set, tcfg.class_weighting);

    let n = cache.len();
    let batches_per_epoch = n.div_ceil(tcfg.batch_size) as u64;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&log_path)?;
    let mut artifacts = vec![log_path.clone()];

    let mut last_epoch_accuracy = 0.0;
    let mut stopped = false;
    while !stopped && epoch < tcfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, 0x501F), epoch));
        order.shuffle(&mut shuffle_rng);

        let done_in_epoch = (iteration - epoch * batches_per_epoch) as usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in order.chunks(tcfg.batch_size).skip(done_in_epoch) {
            let lr = tcfg.lr_at(iteration);
            let result = batch_step(&model, &cache, batch, &run_cfg, seed, epoch, weights)?;
            if !result.loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iteration + 1, loss: result.loss });
            }
            adam.step(&mut model.store, &result.grads, lr, tcfg.beta1, tcfg.beta2, tcfg.epsilon);
            iteration += 1;
            correct += result.correct;
            seen += batch.len();

            if iteration % tcfg.log_every == 0 {
                let record = LogRecord { iteration, epoch, loss: result.loss, lr };
                writeln!(log_file, "{}", serde_json::to_string(&record)?)?;
            }
            if iteration % tcfg.snapshot_every == 0 {
                if let Some((vc, vm)) = &val_cache {
                    let report = evaluate_cached(&model, vc, vm, run_cfg.eval.threshold)?;
                    let path = out_dir.join(format!("val_snapshot_{iteration:08}.json"));
                    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                    artifacts.push(path);
                }
            }
            if tcfg.max_iterations.is_some_and(|m| iteration >= m) {
                stopped = true;
                break;
            }
        }

        if seen > 0 {
            last_epoch_accuracy = correct as f64 / seen as f64;
        }
        if !stopped {
            epoch += 1;
            if epoch % tcfg.checkpoint_every_epochs == 0 {
                let path = out_dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"));
                save_checkpoint(&snapshot(&run_cfg, &model, &adam, epoch, iteration, seed), &path)?;
                artifacts.push(path);
            }
            if tcfg
                .stop_at_train_accuracy
                .is_some_and(|target| last_epoch_accuracy >= target)
            {
                stopped = true;
            }
        }
    }
    log_file.flush()?;

    let final_path = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(&snapshot(&run_cfg, &model, &adam, epoch, iteration, seed), &final_path)?;
    artifacts.push(final_path.clone());

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        epochs_completed: epoch,
        iterations: iteration,
        train_accuracy: last_epoch_accuracy,
        artifacts,
    })
}

fn snapshot(
    cfg: &AppConfig,
    model: &Model,
    adam: &Adam,
    epoch: u64,
    iteration: u64,
    seed: u64,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        epoch,
        iteration,
        rng_seed: seed,
        params: model.store.clone(),
        adam: AdamState { m: adam.m.clone(), v: adam.v.clone(), t: adam.t },
    }
}

fn softmax_prob_1(logits: &Array1<f64>) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

fn evaluate_cached(
    model: &Model,
    cache: &[CachedSample],
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<MetricsReport> {
    let scores: Vec<f64> = cache
        .par_iter()
        .map(|s| {
            let (full, roi) = s.tensors();
            model.forward(&full, &roi).map(|(logits, _)| softmax_prob_1(&logits))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = manifest.records.iter().map(|r| r.label).collect();
    metrics_summary(&labels, &scores, threshold)
}

/// Deterministic forward passes over a manifest; returns class-1 scores in
/// record order.
pub fn predict_scores(ckpt: &Checkpoint, data: &DatasetManifest) -> Result<Vec<f64>> {
    let model = Model::from_parts(ckpt.config.model.clone(), ckpt.params.clone())?;
    let input_side = ckpt.config.model.backbone.input_side;
    data.records
        .par_iter()
        .map(|r| {
            let (full, roi) = preprocess_sample(r, &ckpt.config.imaging, input_side)?;
            let (logits, _) = model.forward(&full, &roi)?;
            Ok(softmax_prob_1(&logits))
        })
        .collect()
}

/// Evaluates a checkpoint on a manifest: no augmentation, scores are class-1
/// probabilities, threshold comes from the checkpoint's eval config.
pub fn evaluate(ckpt: &Checkpoint, data: &DatasetManifest) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let scores = predict_scores(ckpt, data)?;
    let labels: Vec<u8> = data.records.iter().map(|r| r.label).collect();
    metrics_summary(&labels, &scores, ckpt.config.eval.threshold)
}
