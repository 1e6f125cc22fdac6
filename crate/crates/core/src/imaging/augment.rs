//! Training-time augmentation: flips, brightness/contrast jitter, blur.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Multiplicative brightness/contrast factors drawn from `1 ± strength`.
    pub jitter_strength: f64,
    /// Gaussian blur sigma drawn uniformly from this range (pixels).
    pub blur_sigma_range: (f64, f64),
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.flip_h_prob) || !prob_ok(self.flip_v_prob) {
            return Err(Error::invalid_argument("flip probabilities must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::invalid_argument("jitter_strength must be in [0,1]"));
        }
        let (lo, hi) = self.blur_sigma_range;
        if lo < 0.0 || lo > hi {
            return Err(Error::invalid_argument(
                "blur_sigma_range must satisfy 0 <= min <= max",
            ));
        }
        Ok(())
    }

    /// A policy that leaves every image untouched.
    pub fn disabled() -> Self {
        Self {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            jitter_strength: 0.0,
            blur_sigma_range: (0.0, 0.0),
        }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            jitter_strength: 0.2,
            blur_sigma_range: (0.0, 1.0),
        }
    }
}

/// One concrete set of augmentation decisions.
///
/// Sampling is separated from application so the same draw can be applied to
/// several views of a sample (e.g. the full image and its ROI crop).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
}

impl AugmentDraw {
    /// Draws all decisions in a fixed order so the RNG stream is stable
    /// regardless of which transforms end up active.
    pub fn sample<R: Rng>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let u_h = rng.random::<f64>();
        let u_v = rng.random::<f64>();
        let u_b = rng.random::<f64>();
        let u_c = rng.random::<f64>();
        let u_s = rng.random::<f64>();
        let s = policy.jitter_strength;
        let (lo, hi) = policy.blur_sigma_range;
        Self {
            flip_h: u_h < policy.flip_h_prob,
            flip_v: u_v < policy.flip_v_prob,
            brightness: 1.0 - s + 2.0 * s * u_b,
            contrast: 1.0 - s + 2.0 * s * u_c,
            blur_sigma: lo + (hi - lo) * u_s,
        }
    }

    /// Applies the draw. A draw with no active transform is an exact identity.
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        let mut data = image.data().clone();
        let (_, h, w) = data.dim();

        if self.flip_h {
            data.invert_axis(ndarray::Axis(2));
        }
        if self.flip_v {
            data.invert_axis(ndarray::Axis(1));
        }
        if self.flip_h || self.flip_v {
            // Restore standard layout after the stride-reversing flips.
            data = data.as_standard_layout().into_owned();
        }
        if self.brightness != 1.0 {
            data.mapv_inplace(|v| v * self.brightness);
        }
        if self.contrast != 1.0 {
            // Contrast about mid-gray.
            data.mapv_inplace(|v| (v - 0.5) * self.contrast + 0.5);
        }
        if self.blur_sigma > 1e-12 {
            data = gaussian_blur(&data, self.blur_sigma, h, w);
        }
        if self.brightness != 1.0 || self.contrast != 1.0 || self.blur_sigma > 1e-12 {
            data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        ImageTensor::from_valid(data)
    }
}

/// Applies flips, jitter, and blur drawn from `policy` using `rng`.
pub fn augment<R: Rng>(
    image: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ImageTensor> {
    policy.validate()?;
    Ok(AugmentDraw::sample(policy, rng).apply(image))
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(data: &Array3<f64>, sigma: f64, h: usize, w: usize) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let denom = 2.0 * sigma * sigma;
    for d in -radius..=radius {
        kernel.push((-((d * d) as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = Array3::<f64>::zeros(data.raw_dim());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1);
                    acc += k * data[[c, y, sx as usize]];
                }
                tmp[[c, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros(data.raw_dim());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1);
                    acc += k * tmp[[c, sy as usize, x]];
                }
                out[[c, y, x]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn zeroed_policy_is_exact_identity() {
        let img = random_image(3, 9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &AugmentPolicy::disabled(), &mut rng).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let img = random_image(4, 6, 8);
        let policy = AugmentPolicy {
            flip_h_prob: 1.0,
            flip_v_prob: 0.0,
            jitter_strength: 0.0,
            blur_sigma_range: (0.0, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&img, &policy, &mut rng).unwrap();
        let twice = augment(&once, &policy, &mut rng).unwrap();
        assert_eq!(img.data(), twice.data());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = random_image(5, 12, 12);
        let policy = AugmentPolicy::default();
        let a = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn output_stays_in_range() {
        let img = random_image(6, 10, 10);
        let policy = AugmentPolicy {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            jitter_strength: 1.0,
            blur_sigma_range: (0.5, 2.0),
        };
        for seed in 0..20 {
            let out = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for v in out.data().iter() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let img = random_image(7, 4, 4);
        let bad = AugmentPolicy {
            flip_h_prob: 1.5,
            ..AugmentPolicy::disabled()
        };
        assert!(augment(&img, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
