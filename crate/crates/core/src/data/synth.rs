//! Synthetic fundus-like image generator.
//!
//! Produces reddish noisy backgrounds with a bright elliptical disc, a
//! brighter concentric cup, and dark vessel polylines. The label is fully
//! determined by the cup-to-disc ratio, so a Bayes-optimal classifier exists
//! on this data by construction.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_manifest, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{save_image, ImageTensor, RoiBox};

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub image_side: usize,
    /// Cup-to-disc ratio range for non-referable (label 0) samples.
    pub cdr_nonref: (f64, f64),
    /// Cup-to-disc ratio range for referable (label 1) samples.
    pub cdr_ref: (f64, f64),
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            image_side: 299,
            cdr_nonref: (0.2, 0.5),
            cdr_ref: (0.65, 0.95),
        }
    }
}

/// Geometry and appearance of one generated sample.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub label: u8,
    pub disc_cx: f64,
    pub disc_cy: f64,
    pub disc_rx: f64,
    pub disc_ry: f64,
    pub cdr: f64,
    vessels: Vec<Vec<(f64, f64)>>,
    vessel_width: f64,
    disc_tint: f64,
    noise_seed: u64,
}

impl SynthSpec {
    /// Samples geometry for one image. All randomness is drawn here, in a
    /// fixed order, so rendering is a pure function of the sampled geometry.
    pub fn sample(label: u8, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Self {
        let side = opts.image_side as f64;
        let disc_cx = side * rng.random_range(0.38..0.62);
        let disc_cy = side * rng.random_range(0.38..0.62);
        let disc_rx = side * rng.random_range(0.14..0.20);
        let disc_ry = (disc_rx * rng.random_range(0.85..1.15)).min(side * 0.22);
        let (lo, hi) = if label == 1 { opts.cdr_ref } else { opts.cdr_nonref };
        let cdr = rng.random_range(lo..hi);
        let disc_tint = rng.random_range(-0.05..0.05);

        let n_vessels = rng.random_range(4..8usize);
        let mut vessels = Vec::with_capacity(n_vessels);
        for _ in 0..n_vessels {
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mut x = disc_cx + 0.3 * disc_rx * angle.cos();
            let mut y = disc_cy + 0.3 * disc_ry * angle.sin();
            let mut pts = vec![(x, y)];
            let steps = rng.random_range(8..14usize);
            let step_len = side / 18.0;
            for _ in 0..steps {
                angle += rng.random_range(-0.5..0.5);
                x += step_len * angle.cos();
                y += step_len * angle.sin();
                pts.push((x, y));
            }
            vessels.push(pts);
        }

        Self {
            label,
            disc_cx,
            disc_cy,
            disc_rx,
            disc_ry,
            cdr,
            vessels,
            vessel_width: (side / 150.0).max(1.0),
            disc_tint,
            noise_seed: rng.random::<u64>(),
        }
    }

    /// Disc bounding box padded by 20% of the disc extent, end-exclusive.
    pub fn roi_box(&self, side: usize) -> RoiBox {
        let pad_x = 0.4 * self.disc_rx;
        let pad_y = 0.4 * self.disc_ry;
        let x0 = (self.disc_cx - self.disc_rx - pad_x).floor().max(0.0) as usize;
        let y0 = (self.disc_cy - self.disc_ry - pad_y).floor().max(0.0) as usize;
        let x1 = ((self.disc_cx + self.disc_rx + pad_x).ceil() as usize).min(side);
        let y1 = ((self.disc_cy + self.disc_ry + pad_y).ceil() as usize).min(side);
        RoiBox::new(x0, y0, x1, y1)
    }
}

/// Renders the sampled geometry to an image of the given side.
pub fn render_fundus(spec: &SynthSpec, side: usize) -> ImageTensor {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut data = Array3::<f64>::zeros((3, side, side));

    let bg = [0.48, 0.26, 0.15];
    let disc = [
        0.88 + spec.disc_tint,
        0.66 + spec.disc_tint,
        0.42 + spec.disc_tint,
    ];
    let cup = [
        0.97 + spec.disc_tint,
        0.85 + spec.disc_tint,
        0.55 + spec.disc_tint,
    ];

    let cup_rx = spec.cdr * spec.disc_rx;
    let cup_ry = spec.cdr * spec.disc_ry;
    for y in 0..side {
        for x in 0..side {
            let noise = noise_rng.random_range(-0.04..0.04);
            let fx = x as f64;
            let fy = y as f64;
            let d_disc = ellipse_dist(fx, fy, spec.disc_cx, spec.disc_cy, spec.disc_rx, spec.disc_ry);
            let d_cup = ellipse_dist(fx, fy, spec.disc_cx, spec.disc_cy, cup_rx, cup_ry);
            for c in 0..3 {
                // Soft-edged composite: background -> disc -> cup.
                let mut v = bg[c];
                v = v + (disc[c] - v) * coverage(d_disc);
                v = v + (cup[c] - v) * coverage(d_cup);
                data[[c, y, x]] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }

    let vessel = [0.35, 0.12, 0.08];
    for polyline in &spec.vessels {
        for seg in polyline.windows(2) {
            stamp_segment(&mut data, side, seg[0], seg[1], spec.vessel_width, &vessel);
        }
    }
    ImageTensor::from_valid(data)
}

/// Normalized ellipse coordinate: <1 inside, >1 outside.
fn ellipse_dist(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    (dx * dx + dy * dy).sqrt()
}

/// Anti-aliased ellipse coverage over a narrow edge band.
fn coverage(d: f64) -> f64 {
    ((1.02 - d) / 0.04).clamp(0.0, 1.0)
}

fn stamp_segment(
    data: &mut Array3<f64>,
    side: usize,
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
    color: &[f64; 3],
) {
    let x0 = (a.0.min(b.0) - width).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + width).ceil() as usize).min(side.saturating_sub(1));
    let y0 = (a.1.min(b.1) - width).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + width).ceil() as usize).min(side.saturating_sub(1));
    if x0 > x1 || y0 > y1 {
        return;
    }
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = (abx * abx + aby * aby).max(1e-12);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let t = (((x as f64 - a.0) * abx + (y as f64 - a.1) * aby) / len2).clamp(0.0, 1.0);
            let px = a.0 + t * abx;
            let py = a.1 + t * aby;
            let dist = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            let alpha = ((width - dist) / width * 0.9).clamp(0.0, 0.9);
            if alpha > 0.0 {
                for c in 0..3 {
                    let v = data[[c, y, x]];
                    data[[c, y, x]] = v + (color[c] - v) * alpha;
                }
            }
        }
    }
}

/// Generates `n` labeled PNGs plus a manifest in `out_dir`.
pub fn make_synthetic(out_dir: &Path, n: usize, seed: u64, image_side: usize) -> Result<DatasetManifest> {
    make_synthetic_with(out_dir, n, seed, &SynthOptions { image_side, ..Default::default() })
}

pub fn make_synthetic_with(
    out_dir: &Path,
    n: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    if n < 2 {
        return Err(Error::validation("need at least 2 synthetic samples"));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let spec = SynthSpec::sample(label, opts, &mut rng);
        let img = render_fundus(&spec, opts.image_side);
        let name = format!("img_{i:05}.png");
        let path = out_dir.join(&name);
        save_image(&img, &path)?;
        records.push(SampleRecord {
            image_path: path,
            label,
            roi: Some(spec.roi_box(opts.image_side)),
        });
    }

    let manifest = DatasetManifest::new(records)?;
    // The written manifest stores bare file names so the directory moves
    // freely; the returned manifest keeps resolved paths.
    let mut relative = manifest.clone();
    for r in &mut relative.records {
        r.image_path = r.image_path.file_name().unwrap().into();
    }
    write_manifest(&relative, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    // SplitMix64 over the combined words.
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn generates_balanced_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic(dir.path(), 10, 1, 64).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.class_counts(), (5, 5));
        for r in &m.records {
            assert!(r.image_path.exists(), "{:?}", r.image_path);
        }
        let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_synthetic(d1.path(), 4, 9, 64).unwrap();
        make_synthetic(d2.path(), 4, 9, 64).unwrap();
        for i in 0..4 {
            let name = format!("img_{i:05}.png");
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "image {i} differs between identical seeds");
        }
        let a = std::fs::read(d1.path().join("manifest.csv")).unwrap();
        let b = std::fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roi_contains_disc_bounding_box() {
        let opts = SynthOptions { image_side: 128, ..Default::default() };
        for i in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(33, i));
            let spec = SynthSpec::sample((i % 2) as u8, &opts, &mut rng);
            let roi = spec.roi_box(128);
            let disc_x0 = (spec.disc_cx - spec.disc_rx).floor() as usize;
            let disc_x1 = (spec.disc_cx + spec.disc_rx).ceil() as usize;
            let disc_y0 = (spec.disc_cy - spec.disc_ry).floor() as usize;
            let disc_y1 = (spec.disc_cy + spec.disc_ry).ceil() as usize;
            assert!(roi.x0 <= disc_x0 && roi.x1 >= disc_x1, "{roi:?} vs x {disc_x0}..{disc_x1}");
            assert!(roi.y0 <= disc_y0 && roi.y1 >= disc_y1, "{roi:?} vs y {disc_y0}..{disc_y1}");
            roi.validate(128, 128).unwrap();
        }
    }

    #[test]
    fn labels_follow_cdr_threshold() {
        let opts = SynthOptions::default();
        for i in 0..40u64 {
            let label = (i % 2) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, i));
            let spec = SynthSpec::sample(label, &opts, &mut rng);
            if label == 1 {
                assert!(spec.cdr >= 0.65);
            } else {
                assert!(spec.cdr <= 0.5);
            }
        }
    }

    #[test]
    fn rejects_tiny_n() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_synthetic(dir.path(), 1, 0, 64).is_err());
    }
}
