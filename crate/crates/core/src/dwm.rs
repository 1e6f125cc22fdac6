//! Dynamic window mechanism.
//!
//! Scores feature-map windows with stride-1 average pooling, locates score
//! maxima, maps them to image-space center rates and then to pixel corners,
//! and extracts fixed-size patches. Proposal coordinates are deterministic
//! functions of the feature map; ties break row-major (smaller row, then
//! smaller column, first).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, ImageTensor};
use crate::network::FeatureMap;

/// One proposal scale: pooling kernel, output patch size, proposal count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwmScaleConfig {
    /// Window side in feature-map cells.
    pub kernel: usize,
    /// Patch height in image pixels.
    pub patch_h: usize,
    /// Patch width in image pixels.
    pub patch_w: usize,
    /// Number of proposals emitted at this scale.
    pub proposals: usize,
}

impl DwmScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.patch_h == 0 || self.patch_w == 0 || self.proposals == 0 {
            return Err(Error::invalid_argument(
                "dwm scale fields must all be >= 1",
            ));
        }
        Ok(())
    }

    /// The default two-scale configuration for a square input of the given
    /// side: kernel-3 windows mapped to 3/4-side patches and kernel-2 windows
    /// mapped to 3/8-side patches, two proposals each (four patches total).
    pub fn defaults_for(image_side: usize) -> Vec<DwmScaleConfig> {
        vec![
            DwmScaleConfig {
                kernel: 3,
                patch_h: image_side * 3 / 4,
                patch_w: image_side * 3 / 4,
                proposals: 2,
            },
            DwmScaleConfig {
                kernel: 2,
                patch_h: image_side * 3 / 8,
                patch_w: image_side * 3 / 8,
                proposals: 2,
            },
        ]
    }
}

/// Stride-1 channel-summed window scores; `Sh = Hf - k + 1`, `Sw = Wf - k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    data: Array2<f64>,
}

impl ScoreMap {
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// One selected receptive patch in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowProposal {
    pub scale_index: usize,
    pub score: f64,
    pub rate_h: f64,
    pub rate_w: f64,
    /// Inclusive top-left corner.
    pub tl_y: usize,
    pub tl_x: usize,
    /// Exclusive bottom-right corner.
    pub br_y: usize,
    pub br_x: usize,
}

/// Per-channel stride-1 average pooling summed over channels.
pub fn total_score_map(fmap: &FeatureMap, kernel: usize) -> Result<ScoreMap> {
    let (c, hf, wf) = fmap.data().dim();
    if kernel == 0 || kernel > hf.min(wf) {
        return Err(Error::invalid_argument(format!(
            "pooling kernel {kernel} exceeds feature-map sides {hf}x{wf}"
        )));
    }
    let sh = hf - kernel + 1;
    let sw = wf - kernel + 1;
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut data = Array2::<f64>::zeros((sh, sw));
    let src = fmap.data();
    for oy in 0..sh {
        for ox in 0..sw {
            let mut sum = 0.0;
            for ch in 0..c {
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        sum += src[[ch, oy + dy, ox + dx]];
                    }
                }
            }
            data[[oy, ox]] = sum * inv;
        }
    }
    Ok(ScoreMap { data })
}

/// Cells equal to the maximum of their `nms_kernel`² neighborhood
/// (edge-replicated), sorted by value descending with row-major tie-break.
pub fn local_maxima(score: &ScoreMap, nms_kernel: usize) -> Result<Vec<(usize, usize, f64)>> {
    if nms_kernel == 0 || nms_kernel.is_multiple_of(2) {
        return Err(Error::invalid_argument("nms kernel must be odd and >= 1"));
    }
    let (sh, sw) = score.data.dim();
    let r = (nms_kernel / 2) as isize;
    let mut out = Vec::new();
    for y in 0..sh {
        for x in 0..sw {
            let v = score.data[[y, x]];
            let y0 = (y as isize - r).max(0) as usize;
            let y1 = ((y as isize + r) as usize).min(sh - 1);
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = ((x as isize + r) as usize).min(sw - 1);
            let mut is_max = true;
            'scan: for ny in y0..=y1 {
                for nx in x0..=x1 {
                    if score.data[[ny, nx]] > v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                out.push((y, x, v));
            }
        }
    }
    sort_cells(&mut out);
    Ok(out)
}

fn sort_cells(cells: &mut [(usize, usize, f64)]) {
    cells.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("scores are finite")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
}

/// Maps a score-map cell to the center rate of its window in the image.
pub fn window_rate(
    loc: (usize, usize),
    fm_size: (usize, usize),
    score_size: (usize, usize),
) -> Result<(f64, f64)> {
    let (row, col) = loc;
    let (hf, wf) = fm_size;
    let (sh, sw) = score_size;
    if sh == 0 || sw == 0 || sh > hf || sw > wf {
        return Err(Error::invalid_argument(
            "score-map size must be nonzero and no larger than the feature map",
        ));
    }
    if row >= sh || col >= sw {
        return Err(Error::invalid_argument(format!(
            "cell ({row},{col}) out of range for score map {sh}x{sw}"
        )));
    }
    let rate_h = (2 * row + hf - sh + 1) as f64 / (2 * hf) as f64;
    let rate_w = (2 * col + wf - sw + 1) as f64 / (2 * wf) as f64;
    Ok((rate_h, rate_w))
}

/// Converts a center rate to integer patch corners, shift-clamped so the
/// patch keeps its exact size inside the image.
pub fn window_bounds(
    rate: (f64, f64),
    image_size: (usize, usize),
    patch: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = image_size;
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::invalid_argument(format!(
            "patch {ph}x{pw} does not fit image {h}x{w}"
        )));
    }
    let axis = |rate: f64, side: usize, p: usize| -> usize {
        let center = (rate * side as f64).round() as i64;
        let tl = center - (p / 2) as i64;
        tl.clamp(0, (side - p) as i64) as usize
    };
    let tl_y = axis(rate.0, h, ph);
    let tl_x = axis(rate.1, w, pw);
    Ok((tl_y, tl_x, tl_y + ph, tl_x + pw))
}

/// Runs the full proposal pipeline for every scale.
///
/// Per scale: score map → local maxima → top `proposals` cells (padded with
/// the next-highest remaining cells when maxima run short) → center rates →
/// corners. Scales appear in configuration order; within a scale proposals
/// are ordered by descending score.
pub fn propose_windows(
    fmap: &FeatureMap,
    scales: &[DwmScaleConfig],
    image_size: (usize, usize),
    nms_kernel: usize,
) -> Result<Vec<WindowProposal>> {
    let mut out = Vec::new();
    for (scale_index, sc) in scales.iter().enumerate() {
        sc.validate()?;
        let score = total_score_map(fmap, sc.kernel)?;
        let (sh, sw) = (score.height(), score.width());
        if sc.proposals > sh * sw {
            return Err(Error::invalid_argument(format!(
                "scale {scale_index} requests {} proposals but the score map has only {} cells",
                sc.proposals,
                sh * sw
            )));
        }
        let maxima = local_maxima(&score, nms_kernel)?;
        let mut chosen: Vec<(usize, usize, f64)> =
            maxima.iter().take(sc.proposals).copied().collect();
        if chosen.len() < sc.proposals {
            // Pad with the highest-scoring cells not already selected.
            let taken: std::collections::HashSet<(usize, usize)> =
                chosen.iter().map(|&(y, x, _)| (y, x)).collect();
            let mut rest: Vec<(usize, usize, f64)> = (0..sh)
                .flat_map(|y| (0..sw).map(move |x| (y, x)))
                .filter(|c| !taken.contains(c))
                .map(|(y, x)| (y, x, score.data[[y, x]]))
                .collect();
            sort_cells(&mut rest);
            chosen.extend(rest.into_iter().take(sc.proposals - chosen.len()));
        }
        sort_cells(&mut chosen);
        for (row, col, value) in chosen {
            let rate = window_rate((row, col), (fmap.height(), fmap.width()), (sh, sw))?;
            let (tl_y, tl_x, br_y, br_x) =
                window_bounds(rate, image_size, (sc.patch_h, sc.patch_w))?;
            out.push(WindowProposal {
                scale_index,
                score: value,
                rate_h: rate.0,
                rate_w: rate.1,
                tl_y,
                tl_x,
                br_y,
                br_x,
            });
        }
    }
    Ok(out)
}

/// Crops each proposal box and resizes it to `out_side`².
pub fn extract_patches(
    image: &ImageTensor,
    proposals: &[WindowProposal],
    out_side: usize,
) -> Result<Vec<ImageTensor>> {
    let (h, w) = (image.height(), image.width());
    proposals
        .iter()
        .map(|p| {
            if p.tl_y >= p.br_y || p.tl_x >= p.br_x || p.br_y > h || p.br_x > w {
                return Err(Error::invalid_argument(format!(
                    "proposal box ({},{})..({},{}) outside image {h}x{w}",
                    p.tl_y, p.tl_x, p.br_y, p.br_x
                )));
            }
            let crop = image
                .data()
                .slice(ndarray::s![.., p.tl_y..p.br_y, p.tl_x..p.br_x])
                .to_owned();
            resize_bilinear(&ImageTensor::from_valid(crop), out_side, out_side)
        })
        .collect()
}
