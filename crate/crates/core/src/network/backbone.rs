//! Stem + four residual stages with optional CBAM refinement.
//!
//! The stem downsamples by 4 (7×7/2 convolution then 3×3/2 max pool); stages
//! 2–4 each downsample by 2, so a square input of side `s` produces a
//! feature map of side `ceil(s/32)`.

use ndarray::Ix3;
use serde::{Deserialize, Serialize};

use super::params::{ParamNodes, ParamStore};
use super::FeatureMap;
use crate::attention::{cbam_forward_tape, CbamNodes};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the four residual stages, strictly increasing.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub cbam_enabled: bool,
    /// Expected square input side.
    pub input_side: usize,
    /// Channel-attention reduction ratio; must divide every stage width.
    pub cbam_reduction: usize,
    /// Spatial-attention kernel side (odd).
    pub cbam_spatial_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            cbam_enabled: true,
            input_side: 299,
            cbam_reduction: 4,
            cbam_spatial_kernel: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("stage channels must be strictly increasing"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::validation("every stage needs at least one block"));
        }
        if self.input_side < 32 {
            return Err(Error::validation("input side must be at least 32"));
        }
        if self.cbam_reduction == 0
            || self.stage_channels.iter().any(|c| c % self.cbam_reduction != 0)
        {
            return Err(Error::validation(
                "cbam reduction must divide every stage width",
            ));
        }
        if self.cbam_spatial_kernel.is_multiple_of(2) {
            return Err(Error::validation("cbam spatial kernel must be odd"));
        }
        Ok(())
    }

    /// Feature-map side produced from this input side.
    pub fn feature_side(&self) -> usize {
        self.input_side.div_ceil(32)
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

fn cbam_nodes(
    tape: &mut Tape,
    nodes: &mut ParamNodes,
    store: &ParamStore,
    prefix: &str,
) -> CbamNodes {
    CbamNodes {
        reduce_w: nodes.node(tape, store, &format!("{prefix}.reduce.w")),
        expand_w: nodes.node(tape, store, &format!("{prefix}.expand.w")),
        spatial_w: nodes.node(tape, store, &format!("{prefix}.spatial.w")),
        spatial_b: nodes.node(tape, store, &format!("{prefix}.spatial.b")),
    }
}

/// Builds the backbone on a tape and returns the final feature-map node.
pub(super) fn backbone_forward_tape(
    tape: &mut Tape,
    nodes: &mut ParamNodes,
    store: &ParamStore,
    branch: &str,
    input: NodeId,
    cfg: &BackboneConfig,
) -> NodeId {
    let w = nodes.node(tape, store, &format!("{branch}.stem.w"));
    let b = nodes.node(tape, store, &format!("{branch}.stem.b"));
    let mut x = tape.conv2d(input, w, b, 2, 3);
    x = tape.relu(x);
    x = tape.maxpool2d(x, 3, 2, 1);

    let mut in_ch = cfg.stage_channels[0];
    for (s, (&out_ch, &blocks)) in cfg
        .stage_channels
        .iter()
        .zip(cfg.blocks_per_stage.iter())
        .enumerate()
    {
        for blk in 0..blocks {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("{branch}.s{s}.b{blk}");

            let w1 = nodes.node(tape, store, &format!("{p}.conv1.w"));
            let b1 = nodes.node(tape, store, &format!("{p}.conv1.b"));
            let mut body = tape.conv2d(x, w1, b1, stride, 1);
            body = tape.relu(body);
            let w2 = nodes.node(tape, store, &format!("{p}.conv2.w"));
            let b2 = nodes.node(tape, store, &format!("{p}.conv2.b"));
            body = tape.conv2d(body, w2, b2, 1, 1);

            if cfg.cbam_enabled {
                let cn = cbam_nodes(tape, nodes, store, &format!("{p}.cbam"));
                body = cbam_forward_tape(tape, body, &cn);
            }

            let shortcut = if stride != 1 || in_ch != out_ch {
                let ws = nodes.node(tape, store, &format!("{p}.short.w"));
                let bs = nodes.node(tape, store, &format!("{p}.short.b"));
                tape.conv2d(x, ws, bs, stride, 0)
            } else {
                x
            };
            let sum = tape.add(body, shortcut);
            x = tape.relu(sum);
            in_ch = out_ch;
        }
    }

    if cfg.cbam_enabled {
        let cn = cbam_nodes(tape, nodes, store, &format!("{branch}.post_cbam"));
        x = cbam_forward_tape(tape, x, &cn);
    }
    x
}

/// Inference-only forward pass for one branch (`"global"`, `"roi"`, `"patch"`).
pub fn backbone_forward(
    image: &ImageTensor,
    store: &ParamStore,
    branch: &str,
    cfg: &BackboneConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    if image.height() != cfg.input_side || image.width() != cfg.input_side {
        return Err(Error::invalid_argument(format!(
            "input is {}x{} but the backbone expects {}",
            image.height(),
            image.width(),
            cfg.input_side
        )));
    }
    store.get(&format!("{branch}.stem.w"))?;
    let mut tape = Tape::new();
    let mut nodes = ParamNodes::new(store, false);
    let input = tape.leaf(image.data().clone().into_dyn(), false);
    let out = backbone_forward_tape(&mut tape, &mut nodes, store, branch, input, cfg);
    let value = tape
        .value(out)
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("backbone output is 3-d");
    FeatureMap::new(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model_params, ModelConfig};
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, side, side), |_| rng.random::<f64>())).unwrap()
    }

    fn tiny_config(side: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(side);
        cfg.backbone.stage_channels = [4, 8, 16, 32];
        cfg.backbone.cbam_reduction = 2;
        cfg.backbone.cbam_spatial_kernel = 3;
        cfg
    }

    #[test]
    fn feature_side_follows_stride_arithmetic() {
        for (input, expect) in [(299, 10), (224, 7), (64, 2), (128, 4), (96, 3)] {
            let mut cfg = BackboneConfig { input_side: input, ..Default::default() };
            cfg.input_side = input;
            assert_eq!(cfg.feature_side(), expect, "input {input}");
        }
    }

    #[test]
    fn forward_shapes_match_config() {
        for side in [64usize, 96] {
            let cfg = tiny_config(side);
            let store = init_model_params(&cfg, 3).unwrap();
            let img = random_image(side, 1);
            let fm = backbone_forward(&img, &store, "global", &cfg.backbone).unwrap();
            assert_eq!(fm.channels(), 32);
            assert_eq!(fm.height(), side.div_ceil(32));
            assert_eq!(fm.width(), side.div_ceil(32));
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = tiny_config(64);
        let store = init_model_params(&cfg, 4).unwrap();
        let img = random_image(64, 2);
        let a = backbone_forward(&img, &store, "roi", &cfg.backbone).unwrap();
        let b = backbone_forward(&img, &store, "roi", &cfg.backbone).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_input_side_is_rejected() {
        let cfg = tiny_config(64);
        let store = init_model_params(&cfg, 4).unwrap();
        let img = random_image(96, 2);
        assert!(backbone_forward(&img, &store, "global", &cfg.backbone).is_err());
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = BackboneConfig::default();
        cfg.stage_channels = [8, 8, 16, 32];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::default();
        cfg.cbam_reduction = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::default();
        cfg.cbam_spatial_kernel = 4;
        assert!(cfg.validate().is_err());
    }
}
