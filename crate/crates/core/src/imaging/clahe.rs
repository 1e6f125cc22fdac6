//! Contrast limited adaptive histogram equalization.
//!
//! Works on the luminance channel of a YCbCr decomposition so chroma is
//! preserved. Each tile builds a 256-bin histogram, clips it at
//! `clip_limit * area / 256` (excess redistributed uniformly), and remaps
//! through the inclusive CDF; pixel lookups interpolate bilinearly between
//! the four surrounding tile mappings.

use ndarray::{Array2, Array3};

use super::ImageTensor;
use crate::error::{Error, Result};

const BINS: usize = 256;

pub fn clahe(
    image: &ImageTensor,
    clip_limit: f64,
    tile_grid: (usize, usize),
) -> Result<ImageTensor> {
    let (rows, cols) = tile_grid;
    let (h, w) = (image.height(), image.width());
    if !(clip_limit > 0.0) {
        return Err(Error::invalid_argument("clip_limit must be > 0"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_argument("tile grid must be >= 1x1"));
    }
    if rows > h || cols > w {
        return Err(Error::invalid_argument(format!(
            "tile grid {rows}x{cols} larger than image {h}x{w}"
        )));
    }

    let src = image.data();
    // Rec.601 luma; weights sum to 1 so gray stays gray.
    let mut luma = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            luma[[y, x]] =
                0.299 * src[[0, y, x]] + 0.587 * src[[1, y, x]] + 0.114 * src[[2, y, x]];
        }
    }

    // Tile edges split the image as evenly as integer bounds allow.
    let edges = |len: usize, n: usize| -> Vec<usize> {
        (0..=n).map(|i| i * len / n).collect()
    };
    let y_edges = edges(h, rows);
    let x_edges = edges(w, cols);

    // Per-tile lookup tables.
    let mut luts = vec![vec![[0.0f64; BINS]; cols]; rows];
    for (r, lut_row) in luts.iter_mut().enumerate() {
        for (c, lut) in lut_row.iter_mut().enumerate() {
            *lut = tile_lut(
                &luma,
                y_edges[r],
                y_edges[r + 1],
                x_edges[c],
                x_edges[c + 1],
                clip_limit,
            );
        }
    }

    // Tile centers in pixel coordinates (pixel centers at integer coords).
    let centers = |e: &[usize]| -> Vec<f64> {
        e.windows(2).map(|p| (p[0] + p[1]) as f64 / 2.0 - 0.5).collect()
    };
    let cy = centers(&y_edges);
    let cx = centers(&x_edges);

    // Neighboring tile pair + interpolation weight for a pixel coordinate.
    let locate = |pos: f64, centers: &[f64]| -> (usize, usize, f64) {
        if pos <= centers[0] {
            return (0, 0, 0.0);
        }
        if pos >= *centers.last().unwrap() {
            let last = centers.len() - 1;
            return (last, last, 0.0);
        }
        let hi = centers.partition_point(|&c| c <= pos);
        let lo = hi - 1;
        let t = (pos - centers[lo]) / (centers[hi] - centers[lo]);
        (lo, hi, t)
    };

    let mut new_luma = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let (r0, r1, ty) = locate(y as f64, &cy);
        for x in 0..w {
            let (c0, c1, tx) = locate(x as f64, &cx);
            let bin = value_bin(luma[[y, x]]);
            let top = luts[r0][c0][bin] * (1.0 - tx) + luts[r0][c1][bin] * tx;
            let bot = luts[r1][c0][bin] * (1.0 - tx) + luts[r1][c1][bin] * tx;
            new_luma[[y, x]] = top * (1.0 - ty) + bot * ty;
        }
    }

    // Recompose: keep Cb/Cr, swap luma, clamp to [0,1].
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (rv, bv) = (src[[0, y, x]], src[[2, y, x]]);
            let yv = luma[[y, x]];
            let cb = (bv - yv) * 0.564;
            let cr = (rv - yv) * 0.713;
            let y2 = new_luma[[y, x]];
            out[[0, y, x]] = (y2 + 1.403 * cr).clamp(0.0, 1.0);
            out[[1, y, x]] = (y2 - 0.714 * cr - 0.344 * cb).clamp(0.0, 1.0);
            out[[2, y, x]] = (y2 + 1.773 * cb).clamp(0.0, 1.0);
        }
    }
    Ok(ImageTensor::from_valid(out))
}

fn value_bin(v: f64) -> usize {
    ((v * (BINS - 1) as f64).round() as isize).clamp(0, BINS as isize - 1) as usize
}

fn tile_lut(
    luma: &Array2<f64>,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    clip_limit: f64,
) -> [f64; BINS] {
    let area = ((y1 - y0) * (x1 - x0)) as f64;
    let mut hist = [0.0f64; BINS];
    for y in y0..y1 {
        for x in x0..x1 {
            hist[value_bin(luma[[y, x]])] += 1.0;
        }
    }

    if clip_limit.is_finite() {
        let limit = clip_limit * area / BINS as f64;
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let share = excess / BINS as f64;
        for h in hist.iter_mut() {
            *h += share;
        }
    }

    let mut lut = [0.0f64; BINS];
    let mut cum = 0.0;
    for (l, h) in lut.iter_mut().zip(hist.iter()) {
        cum += h;
        *l = cum / area;
    }
    lut
}
