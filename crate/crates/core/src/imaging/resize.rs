//! Bilinear resizing and ROI cropping.

use ndarray::Array3;

use super::{ImageTensor, RoiBox};
use crate::error::{Error, Result};

/// Resizes with the half-pixel-center convention.
///
/// Destination pixel centers map to source coordinates
/// `(i + 0.5) * scale - 0.5`, clamped to the source grid, so resizing to the
/// same size is an exact identity.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid_argument("output sides must be >= 1"));
    }
    let src = image.data();
    let (_, h, w) = src.dim();
    let mut out = Array3::<f64>::zeros((3, out_h, out_w));

    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;

    // Precompute per-axis neighbor indices and weights.
    let axis = |out_len: usize, src_len: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, src_len as f64 - 1.0);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h, scale_y);
    let xs = axis(out_w, w, scale_x);

    for c in 0..3 {
        let plane = src.index_axis(ndarray::Axis(0), c);
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - tx) + plane[[y0, x1]] * tx;
                let bot = plane[[y1, x0]] * (1.0 - tx) + plane[[y1, x1]] * tx;
                out[[c, oy, ox]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(ImageTensor::from_valid(out))
}

/// Crops `box_` out of the image and resizes the crop to `out_side`².
pub fn crop_roi(image: &ImageTensor, box_: &RoiBox, out_side: usize) -> Result<ImageTensor> {
    box_.validate(image.width(), image.height())?;
    let cropped = image
        .data()
        .slice(ndarray::s![.., box_.y0..box_.y1, box_.x0..box_.x1])
        .to_owned();
    resize_bilinear(&ImageTensor::from_valid(cropped), out_side, out_side)
}
