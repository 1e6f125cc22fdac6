//! Image pipeline: decoding, CLAHE, ROI cropping, resizing, augmentation.
//!
//! All operations work on [`ImageTensor`] (3×H×W, values in `[0,1]`) and are
//! pure functions of their inputs; randomness enters only through an
//! explicitly passed RNG.

mod augment;
mod clahe;
mod io;
mod resize;

pub use augment::{augment, AugmentDraw, AugmentPolicy};
pub use clahe::clahe;
pub use io::{load_image, save_image};
pub use resize::{crop_roi, resize_bilinear};

use ndarray::Array3;

use crate::error::{Error, Result};

/// A 3×H×W image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an array, validating shape and value range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::invalid_argument(format!(
                "image must have exactly 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid_argument("image sides must be >= 1"));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid_argument(
                "image values must lie within [0,1]",
            ));
        }
        Ok(Self { data })
    }

    /// Wraps an array that is known to satisfy the invariants.
    pub(crate) fn from_valid(data: Array3<f64>) -> Self {
        debug_assert_eq!(data.dim().0, 3);
        Self { data }
    }

    /// A constant image of the given value.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// An axis-aligned pixel box, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RoiBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Checks the box against the dimensions of the image it indexes.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::invalid_argument(format!(
                "roi box must have positive extent, got {self:?}"
            )));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::invalid_argument(format!(
                "roi box {self:?} exceeds image bounds {width}x{height}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}
