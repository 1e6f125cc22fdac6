//! Python bindings for the core image pipeline, dynamic window mechanism,
//! attention blocks, metrics, and the training engine.
//!
//! Arrays cross the boundary as flat `list[float]` in channel-major order
//! (index = (c * height + y) * width + x) plus explicit dimensions.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fundus_dwm::attention;
use fundus_dwm::config::AppConfig;
use fundus_dwm::data;
use fundus_dwm::dwm;
use fundus_dwm::engine;
use fundus_dwm::imaging;
use fundus_dwm::metrics;
use fundus_dwm::network::{self, FeatureMap, ModelConfig};
use fundus_dwm::viz;
use fundus_dwm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Image(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn array3_from_flat(data: Vec<f64>, c: usize, h: usize, w: usize) -> PyResult<Array3<f64>> {
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| PyValueError::new_err(format!("bad array shape: {e}")))
}

/// An RGB image with values in [0,1], stored channel-major.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: imaging::ImageTensor,
}

#[pymethods]
impl PyImage {
    /// Builds an image from a flat channel-major list of length 3*h*w.
    #[new]
    fn new(data: Vec<f64>, height: usize, width: usize) -> PyResult<Self> {
        let arr = array3_from_flat(data, 3, height, width)?;
        Ok(Self { inner: imaging::ImageTensor::new(arr).map_err(py_err)? })
    }

    #[staticmethod]
    fn constant(height: usize, width: usize, value: f64) -> PyResult<Self> {
        Ok(Self { inner: imaging::ImageTensor::constant(height, width, value).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: imaging::load_image(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imaging::save_image(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Flat channel-major pixel data.
    fn data(&self) -> Vec<f64> {
        self.inner.data().iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Image(3x{}x{})", self.inner.height(), self.inner.width())
    }
}

/// One selected receptive patch.
#[pyclass(name = "WindowProposal", from_py_object)]
#[derive(Clone)]
struct PyWindowProposal {
    #[pyo3(get)]
    scale_index: usize,
    #[pyo3(get)]
    score: f64,
    #[pyo3(get)]
    rate_h: f64,
    #[pyo3(get)]
    rate_w: f64,
    #[pyo3(get)]
    tl_y: usize,
    #[pyo3(get)]
    tl_x: usize,
    #[pyo3(get)]
    br_y: usize,
    #[pyo3(get)]
    br_x: usize,
}

impl From<dwm::WindowProposal> for PyWindowProposal {
    fn from(p: dwm::WindowProposal) -> Self {
        Self {
            scale_index: p.scale_index,
            score: p.score,
            rate_h: p.rate_h,
            rate_w: p.rate_w,
            tl_y: p.tl_y,
            tl_x: p.tl_x,
            br_y: p.br_y,
            br_x: p.br_x,
        }
    }
}

impl From<&PyWindowProposal> for dwm::WindowProposal {
    fn from(p: &PyWindowProposal) -> Self {
        Self {
            scale_index: p.scale_index,
            score: p.score,
            rate_h: p.rate_h,
            rate_w: p.rate_w,
            tl_y: p.tl_y,
            tl_x: p.tl_x,
            br_y: p.br_y,
            br_x: p.br_x,
        }
    }
}

#[pymethods]
impl PyWindowProposal {
    fn __repr__(&self) -> String {
        format!(
            "WindowProposal(scale={}, score={:.4}, tl=({},{}), br=({},{}))",
            self.scale_index, self.score, self.tl_y, self.tl_x, self.br_y, self.br_x
        )
    }
}

/// Evaluation metrics plus confusion counts.
#[pyclass(name = "MetricsReport", from_py_object)]
#[derive(Clone)]
struct PyMetricsReport {
    #[pyo3(get)]
    ap: Option<f64>,
    #[pyo3(get)]
    auc: Option<f64>,
    #[pyo3(get)]
    acc: f64,
    #[pyo3(get)]
    f1: f64,
    #[pyo3(get)]
    sen: f64,
    #[pyo3(get)]
    spe: f64,
    #[pyo3(get)]
    tp: u64,
    #[pyo3(get)]
    fp: u64,
    #[pyo3(get)]
    tn: u64,
    #[pyo3(get, name = "fn_")]
    fn_count: u64,
    #[pyo3(get)]
    threshold: f64,
    #[pyo3(get)]
    warnings: Vec<String>,
}

impl From<metrics::MetricsReport> for PyMetricsReport {
    fn from(r: metrics::MetricsReport) -> Self {
        Self {
            ap: r.ap,
            auc: r.auc,
            acc: r.acc,
            f1: r.f1,
            sen: r.sen,
            spe: r.spe,
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_count: r.counts.fn_,
            threshold: r.threshold,
            warnings: r.warnings,
        }
    }
}

#[pymethods]
impl PyMetricsReport {
    fn __repr__(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("None".to_string(), |x| format!("{x:.4}"));
        format!(
            "MetricsReport(ap={}, auc={}, acc={:.4}, f1={:.4}, sen={:.4}, spe={:.4})",
            opt(self.ap),
            opt(self.auc),
            self.acc,
            self.f1,
            self.sen,
            self.spe
        )
    }
}

// --------------------------------------------------------------------------
// Imaging
// --------------------------------------------------------------------------

/// Contrast limited adaptive histogram equalization on the luminance channel.
#[pyfunction]
#[pyo3(signature = (image, clip_limit=2.0, tile_rows=8, tile_cols=8))]
fn clahe(image: &PyImage, clip_limit: f64, tile_rows: usize, tile_cols: usize) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: imaging::clahe(&image.inner, clip_limit, (tile_rows, tile_cols)).map_err(py_err)?,
    })
}

/// Bilinear resize with half-pixel centers.
#[pyfunction]
fn resize_bilinear(image: &PyImage, out_h: usize, out_w: usize) -> PyResult<PyImage> {
    Ok(PyImage { inner: imaging::resize_bilinear(&image.inner, out_h, out_w).map_err(py_err)? })
}

/// Crops the end-exclusive box (x0, y0, x1, y1) and resizes to out_side².
#[pyfunction]
#[pyo3(signature = (image, x0, y0, x1, y1, out_side=800))]
fn crop_roi(
    image: &PyImage,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    out_side: usize,
) -> PyResult<PyImage> {
    let box_ = imaging::RoiBox::new(x0, y0, x1, y1);
    Ok(PyImage { inner: imaging::crop_roi(&image.inner, &box_, out_side).map_err(py_err)? })
}

/// Seeded flip/jitter/blur augmentation.
#[pyfunction]
#[pyo3(signature = (image, seed, flip_h_prob=0.5, flip_v_prob=0.5, jitter_strength=0.2, blur_sigma_min=0.0, blur_sigma_max=1.0))]
fn augment(
    image: &PyImage,
    seed: u64,
    flip_h_prob: f64,
    flip_v_prob: f64,
    jitter_strength: f64,
    blur_sigma_min: f64,
    blur_sigma_max: f64,
) -> PyResult<PyImage> {
    use rand::SeedableRng;
    let policy = imaging::AugmentPolicy {
        flip_h_prob,
        flip_v_prob,
        jitter_strength,
        blur_sigma_range: (blur_sigma_min, blur_sigma_max),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(PyImage { inner: imaging::augment(&image.inner, &policy, &mut rng).map_err(py_err)? })
}

// --------------------------------------------------------------------------
// Dynamic window mechanism
// --------------------------------------------------------------------------

/// Stride-1 average-pool scores summed over channels; returns (flat, sh, sw).
#[pyfunction]
fn total_score_map(
    fmap: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
) -> PyResult<(Vec<f64>, usize, usize)> {
    let fm = FeatureMap::new(array3_from_flat(fmap, channels, height, width)?).map_err(py_err)?;
    let score = dwm::total_score_map(&fm, kernel).map_err(py_err)?;
    let (sh, sw) = (score.height(), score.width());
    Ok((score.data().iter().copied().collect(), sh, sw))
}

/// Neighborhood maxima of a score map, value-descending with row-major ties.
#[pyfunction]
#[pyo3(signature = (score, sh, sw, nms_kernel=3))]
fn local_maxima(
    score: Vec<f64>,
    sh: usize,
    sw: usize,
    nms_kernel: usize,
) -> PyResult<Vec<(usize, usize, f64)>> {
    let arr = Array2::from_shape_vec((sh, sw), score)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let fm = FeatureMap::new(arr.insert_axis(ndarray::Axis(0))).map_err(py_err)?;
    let score = dwm::total_score_map(&fm, 1).map_err(py_err)?;
    dwm::local_maxima(&score, nms_kernel).map_err(py_err)
}

/// Center rate of the score cell (row, col) per the window-rate mapping.
#[pyfunction]
fn window_rate(
    row: usize,
    col: usize,
    fm_h: usize,
    fm_w: usize,
    score_h: usize,
    score_w: usize,
) -> PyResult<(f64, f64)> {
    dwm::window_rate((row, col), (fm_h, fm_w), (score_h, score_w)).map_err(py_err)
}

/// Maps a center rate to clamped integer corners (tl_y, tl_x, br_y, br_x).
#[pyfunction]
fn window_bounds(
    rate_h: f64,
    rate_w: f64,
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
) -> PyResult<(usize, usize, usize, usize)> {
    dwm::window_bounds((rate_h, rate_w), (image_h, image_w), (patch_h, patch_w)).map_err(py_err)
}

/// Full proposal pipeline. `scales` is a list of
/// (kernel, patch_h, patch_w, proposals) tuples.
#[pyfunction]
#[pyo3(signature = (fmap, channels, height, width, scales, image_h, image_w, nms_kernel=3))]
#[allow(clippy::too_many_arguments)]
fn propose_windows(
    fmap: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    scales: Vec<(usize, usize, usize, usize)>,
    image_h: usize,
    image_w: usize,
    nms_kernel: usize,
) -> PyResult<Vec<PyWindowProposal>> {
    let fm = FeatureMap::new(array3_from_flat(fmap, channels, height, width)?).map_err(py_err)?;
    let scales: Vec<dwm::DwmScaleConfig> = scales
        .into_iter()
        .map(|(kernel, patch_h, patch_w, proposals)| dwm::DwmScaleConfig {
            kernel,
            patch_h,
            patch_w,
            proposals,
        })
        .collect();
    let proposals =
        dwm::propose_windows(&fm, &scales, (image_h, image_w), nms_kernel).map_err(py_err)?;
    Ok(proposals.into_iter().map(PyWindowProposal::from).collect())
}

/// Crops each proposal and resizes it to out_side².
#[pyfunction]
#[pyo3(signature = (image, proposals, out_side=299))]
fn extract_patches(
    image: &PyImage,
    proposals: Vec<PyWindowProposal>,
    out_side: usize,
) -> PyResult<Vec<PyImage>> {
    let props: Vec<dwm::WindowProposal> = proposals.iter().map(Into::into).collect();
    let patches = dwm::extract_patches(&image.inner, &props, out_side).map_err(py_err)?;
    Ok(patches.into_iter().map(|p| PyImage { inner: p }).collect())
}

// --------------------------------------------------------------------------
// Attention
// --------------------------------------------------------------------------

/// Channel-attention weights: sigmoid(MLP(avg) + MLP(max)).
#[pyfunction]
fn channel_attention(
    fmap: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    reduce_weights: Vec<f64>,
    expand_weights: Vec<f64>,
    reduced_dim: usize,
) -> PyResult<Vec<f64>> {
    let fm = FeatureMap::new(array3_from_flat(fmap, channels, height, width)?).map_err(py_err)?;
    let reduce = Array2::from_shape_vec((channels, reduced_dim), reduce_weights)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let expand = Array2::from_shape_vec((reduced_dim, channels), expand_weights)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let params = attention::ChannelAttentionParams::new(reduce, expand).map_err(py_err)?;
    let w = attention::channel_attention(&fm, &params).map_err(py_err)?;
    Ok(w.to_vec())
}

/// Spatial-attention weights over the stacked channel-mean/max maps.
#[pyfunction]
fn spatial_attention(
    fmap: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    conv_kernel: Vec<f64>,
    kernel_side: usize,
    bias: f64,
) -> PyResult<(Vec<f64>, usize, usize)> {
    let fm = FeatureMap::new(array3_from_flat(fmap, channels, height, width)?).map_err(py_err)?;
    let kernel = array3_from_flat(conv_kernel, 2, kernel_side, kernel_side)?;
    let params = attention::SpatialAttentionParams::new(kernel, bias).map_err(py_err)?;
    let w = attention::spatial_attention(&fm, &params).map_err(py_err)?;
    Ok((w.iter().copied().collect(), height, width))
}

// --------------------------------------------------------------------------
// Metrics
// --------------------------------------------------------------------------

/// Confusion counts (tp, fp, tn, fn) at `score >= threshold`.
#[pyfunction]
#[pyo3(signature = (labels, scores, threshold=0.5))]
fn confusion_counts(labels: Vec<u8>, scores: Vec<f64>, threshold: f64) -> PyResult<(u64, u64, u64, u64)> {
    let c = metrics::confusion_counts(&labels, &scores, threshold).map_err(py_err)?;
    Ok((c.tp, c.fp, c.tn, c.fn_))
}

/// Area under the ROC curve (equals pairwise concordance with 0.5 ties).
#[pyfunction]
fn roc_auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    metrics::roc_auc(&labels, &scores).map_err(py_err)
}

/// Average precision with pessimistic tie ordering.
#[pyfunction]
fn average_precision(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    metrics::average_precision(&labels, &scores).map_err(py_err)
}

/// All six metrics plus confusion counts at the given threshold.
#[pyfunction]
#[pyo3(signature = (labels, scores, threshold=0.5))]
fn metrics_summary(labels: Vec<u8>, scores: Vec<f64>, threshold: f64) -> PyResult<PyMetricsReport> {
    Ok(metrics::metrics_summary(&labels, &scores, threshold).map_err(py_err)?.into())
}

// --------------------------------------------------------------------------
// Data and engine
// --------------------------------------------------------------------------

/// Generates a balanced synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed=42, image_side=299))]
fn make_synthetic(out_dir: PathBuf, n: usize, seed: u64, image_side: usize) -> PyResult<String> {
    data::make_synthetic(&out_dir, n, seed, image_side).map_err(py_err)?;
    Ok(out_dir.join("manifest.csv").to_string_lossy().into_owned())
}

/// (total, non-referable, referable) counts of a manifest.
#[pyfunction]
fn manifest_counts(path: PathBuf) -> PyResult<(usize, usize, usize)> {
    let m = data::load_manifest(&path).map_err(py_err)?;
    let (neg, pos) = m.class_counts();
    Ok((m.len(), neg, pos))
}

fn base_config(config_path: Option<PathBuf>, input_side: Option<usize>, seed: Option<u64>) -> PyResult<AppConfig> {
    let mut cfg = match config_path {
        Some(p) => AppConfig::load(&p).map_err(py_err)?,
        None => AppConfig::default(),
    };
    if let Some(side) = input_side {
        cfg.model = ModelConfig::desk_default(side);
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Trains on a manifest (internally split train/val/test); returns the final
/// checkpoint path.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config=None, input_side=None, epochs=None, batch_size=None, seed=None, max_iterations=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    input_side: Option<usize>,
    epochs: Option<u64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    max_iterations: Option<u64>,
) -> PyResult<String> {
    let mut cfg = base_config(config, input_side, seed)?;
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.max_iterations = max_iterations;

    let all = data::load_manifest(&manifest).map_err(py_err)?;
    let (train_set, val_set, _test) =
        data::split_records(&all, cfg.data.split, cfg.train.seed).map_err(py_err)?;
    let outcome =
        engine::train(&cfg, &train_set, Some(&val_set), &out_dir, None).map_err(py_err)?;
    Ok(outcome.final_checkpoint.to_string_lossy().into_owned())
}

/// Evaluates a checkpoint over a manifest.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, manifest: PathBuf) -> PyResult<PyMetricsReport> {
    let ckpt = engine::load_checkpoint(&checkpoint).map_err(py_err)?;
    let m = data::load_manifest(&manifest).map_err(py_err)?;
    Ok(engine::evaluate(&ckpt, &m).map_err(py_err)?.into())
}

/// Runs the model on one image and writes a proposal-overlay PNG; returns the
/// drawn proposals.
#[pyfunction]
fn show_windows(
    image: PathBuf,
    checkpoint: PathBuf,
    out_png: PathBuf,
) -> PyResult<Vec<PyWindowProposal>> {
    let ckpt = engine::load_checkpoint(&checkpoint).map_err(py_err)?;
    let model_cfg = &ckpt.config.model;
    let side = model_cfg.backbone.input_side;
    let img = imaging::load_image(&image).map_err(py_err)?;
    let full = imaging::resize_bilinear(&img, side, side).map_err(py_err)?;
    let fm = network::backbone_forward(&full, &ckpt.params, "global", &model_cfg.backbone)
        .map_err(py_err)?;
    let proposals =
        dwm::propose_windows(&fm, &model_cfg.dwm_scales, (side, side), model_cfg.nms_kernel)
            .map_err(py_err)?;
    let overlay = viz::draw_proposals(&full, &proposals);
    if let Some(parent) = out_png.parent() {
        if !parent.as_os_str().is_empty() && parent != Path::new("") {
            std::fs::create_dir_all(parent).map_err(|e| py_err(Error::Io(e)))?;
        }
    }
    imaging::save_image(&overlay, &out_png).map_err(py_err)?;
    Ok(proposals.into_iter().map(PyWindowProposal::from).collect())
}

/// Class-1 probabilities for every record of a manifest, in order.
#[pyfunction]
fn predict_scores(checkpoint: PathBuf, manifest: PathBuf) -> PyResult<Vec<f64>> {
    let ckpt = engine::load_checkpoint(&checkpoint).map_err(py_err)?;
    let m = data::load_manifest(&manifest).map_err(py_err)?;
    engine::predict_scores(&ckpt, &m).map_err(py_err)
}

#[pymodule]
fn fundus_dwm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyWindowProposal>()?;
    m.add_class::<PyMetricsReport>()?;
    m.add_function(wrap_pyfunction!(clahe, m)?)?;
    m.add_function(wrap_pyfunction!(resize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(crop_roi, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(total_score_map, m)?)?;
    m.add_function(wrap_pyfunction!(local_maxima, m)?)?;
    m.add_function(wrap_pyfunction!(window_rate, m)?)?;
    m.add_function(wrap_pyfunction!(window_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(propose_windows, m)?)?;
    m.add_function(wrap_pyfunction!(extract_patches, m)?)?;
    m.add_function(wrap_pyfunction!(channel_attention, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_attention, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_counts, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_summary, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_counts, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(show_windows, m)?)?;
    m.add_function(wrap_pyfunction!(predict_scores, m)?)?;
    Ok(())
}
