//! Backbone feature extractor, branch encoders, and fusion head.

mod backbone;
mod fusion;
mod model;
mod params;

pub use backbone::{backbone_forward, BackboneConfig};
pub use fusion::{fuse_and_classify, FusionConfig, FusionMode};
pub use model::{branch_embed, model_forward, model_forward_fixed, Model, ModelConfig};
pub use params::{init_model_params, ParamStore};

use ndarray::Array3;

use crate::error::{Error, Result};

/// A C×Hf×Wf activation map produced by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid_argument("feature map must be non-empty"));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
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
