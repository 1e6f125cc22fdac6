//! The three-branch model: global encoder, dynamic-window patch encoder
//! (shared weights across patches), ROI encoder, and the fusion head.

use ndarray::{Array1, ArrayD};
use serde::{Deserialize, Serialize};

use super::backbone::{backbone_forward_tape, BackboneConfig};
use super::fusion::{fusion_forward_tape, FusionConfig};
use super::params::{init_model_params, ParamNodes, ParamStore};
use super::FeatureMap;
use crate::autodiff::{NodeId, Tape};
use crate::dwm::{extract_patches, propose_windows, DwmScaleConfig, WindowProposal};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Every branch embedding has this many dimensions.
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub dwm_scales: Vec<DwmScaleConfig>,
    pub nms_kernel: usize,
    /// Side that extracted patches are resized to before encoding.
    pub patch_side: usize,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Small CPU-friendly configuration for the given input side.
    pub fn desk_default(input_side: usize) -> Self {
        let backbone = BackboneConfig { input_side, ..Default::default() };
        let feature_side = backbone.feature_side();
        // Shrink kernels on small feature maps so every scale keeps at least
        // a 2x2 score map (room for two distinct proposals).
        let scales: Vec<DwmScaleConfig> = DwmScaleConfig::defaults_for(input_side)
            .into_iter()
            .map(|mut s| {
                s.kernel = s.kernel.min(feature_side.saturating_sub(1).max(1));
                let score_side = feature_side - s.kernel + 1;
                s.proposals = s.proposals.min(score_side * score_side);
                s
            })
            .collect();
        let token_count = scales.iter().map(|s| s.proposals).sum::<usize>() + 2;
        Self {
            backbone,
            dwm_scales: scales,
            nms_kernel: 3,
            // Half-resolution patch encoding keeps the four patch passes at
            // roughly the cost of one full-size pass.
            patch_side: (input_side / 2).max(32),
            fusion: FusionConfig { token_count, ..Default::default() },
        }
    }

    pub fn proposal_count(&self) -> usize {
        self.dwm_scales.iter().map(|s| s.proposals).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(EMBED_DIM)?;
        if self.dwm_scales.is_empty() && self.fusion.token_count != 2 {
            return Err(Error::validation(
                "without dwm scales the fusion must expect exactly 2 tokens",
            ));
        }
        let feature_side = self.backbone.feature_side();
        for s in &self.dwm_scales {
            s.validate()?;
            if s.kernel > feature_side {
                return Err(Error::validation(format!(
                    "dwm kernel {} exceeds feature-map side {feature_side}",
                    s.kernel
                )));
            }
            let score_side = feature_side - s.kernel + 1;
            if s.proposals > score_side * score_side {
                return Err(Error::validation(format!(
                    "scale requests {} proposals but its score map has {} cells",
                    s.proposals,
                    score_side * score_side
                )));
            }
            if s.patch_h > self.backbone.input_side || s.patch_w > self.backbone.input_side {
                return Err(Error::validation(format!(
                    "patch {}x{} larger than the {} input",
                    s.patch_h, s.patch_w, self.backbone.input_side
                )));
            }
        }
        if self.nms_kernel == 0 || self.nms_kernel.is_multiple_of(2) {
            return Err(Error::validation("nms kernel must be odd"));
        }
        if self.patch_side < 32 {
            return Err(Error::validation("patch side must be at least 32"));
        }
        if self.fusion.token_count != self.proposal_count() + 2 {
            return Err(Error::validation(format!(
                "fusion token count {} != proposals {} + global + roi",
                self.fusion.token_count,
                self.proposal_count()
            )));
        }
        Ok(())
    }
}

/// Global average pooling followed by a linear map to [`EMBED_DIM`] values.
pub fn branch_embed(
    fmap: &FeatureMap,
    weights: &ndarray::Array2<f64>,
    bias: &Array1<f64>,
) -> Result<Array1<f64>> {
    let c = fmap.channels();
    if weights.dim().1 != c || weights.dim().0 != bias.len() {
        return Err(Error::invalid_argument(format!(
            "embed weights {:?} do not match {c} channels / bias {}",
            weights.dim(),
            bias.len()
        )));
    }
    let inv = 1.0 / (fmap.height() * fmap.width()) as f64;
    let mut pooled = Array1::<f64>::zeros(c);
    for ci in 0..c {
        pooled[ci] = fmap.data().index_axis(ndarray::Axis(0), ci).sum() * inv;
    }
    Ok(weights.dot(&pooled) + bias)
}

fn embed_tape(
    tape: &mut Tape,
    nodes: &mut ParamNodes,
    store: &ParamStore,
    branch: &str,
    fmap: NodeId,
) -> NodeId {
    let pooled = tape.global_avg_pool(fmap);
    let w = nodes.node(tape, store, &format!("{branch}.embed.w"));
    let b = nodes.node(tape, store, &format!("{branch}.embed.b"));
    tape.linear_vec(pooled, w, b)
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Result of one differentiable forward/backward pass.
pub struct SampleGrads {
    pub loss: f64,
    pub logits: Array1<f64>,
    pub proposals: Vec<WindowProposal>,
    /// Gradient per store index, aligned with [`ParamStore`] ordering.
    pub grads: Vec<Option<ArrayD<f64>>>,
}

struct ForwardPlan {
    logits: NodeId,
    proposals: Vec<WindowProposal>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = init_model_params(&config, seed)?;
        Ok(Self { config, store })
    }

    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, store })
    }

    fn check_inputs(&self, full: &ImageTensor, roi: &ImageTensor) -> Result<()> {
        let side = self.config.backbone.input_side;
        for (name, img) in [("full", full), ("roi", roi)] {
            if img.height() != side || img.width() != side {
                return Err(Error::invalid_argument(format!(
                    "{name} image is {}x{}, expected {side}x{side}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }

    /// Builds the whole forward graph. When `fixed` is given, its proposals
    /// are used instead of recomputing them from the feature map (the
    /// proposal coordinates are non-differentiable constants either way).
    fn build_forward(
        &self,
        tape: &mut Tape,
        nodes: &mut ParamNodes,
        full: &ImageTensor,
        roi: &ImageTensor,
        fixed: Option<&[WindowProposal]>,
    ) -> Result<ForwardPlan> {
        let cfg = &self.config;
        let full_node = tape.leaf(full.data().clone().into_dyn(), false);
        let global_fm = backbone_forward_tape(tape, nodes, &self.store, "global", full_node, &cfg.backbone);
        let global_emb = embed_tape(tape, nodes, &self.store, "global", global_fm);

        let proposals = match fixed {
            Some(p) => p.to_vec(),
            None => {
                let fm = FeatureMap::new(tape.value3(global_fm))?;
                propose_windows(
                    &fm,
                    &cfg.dwm_scales,
                    (full.height(), full.width()),
                    cfg.nms_kernel,
                )?
            }
        };

        let patch_cfg = BackboneConfig { input_side: cfg.patch_side, ..cfg.backbone.clone() };
        let patches = extract_patches(full, &proposals, cfg.patch_side)?;
        let mut embeddings = Vec::with_capacity(proposals.len() + 2);
        for patch in &patches {
            let node = tape.leaf(patch.data().clone().into_dyn(), false);
            let fm = backbone_forward_tape(tape, nodes, &self.store, "patch", node, &patch_cfg);
            embeddings.push(embed_tape(tape, nodes, &self.store, "patch", fm));
        }
        embeddings.push(global_emb);

        let roi_node = tape.leaf(roi.data().clone().into_dyn(), false);
        let roi_fm = backbone_forward_tape(tape, nodes, &self.store, "roi", roi_node, &cfg.backbone);
        embeddings.push(embed_tape(tape, nodes, &self.store, "roi", roi_fm));

        if embeddings.len() != cfg.fusion.token_count {
            return Err(Error::invalid_argument(format!(
                "{} embeddings but fusion expects {}",
                embeddings.len(),
                cfg.fusion.token_count
            )));
        }
        let logits = fusion_forward_tape(tape, nodes, &self.store, &embeddings, &cfg.fusion);
        Ok(ForwardPlan { logits, proposals })
    }

    /// Inference: logits plus the window proposals used for the patch branch.
    pub fn forward(
        &self,
        full: &ImageTensor,
        roi: &ImageTensor,
    ) -> Result<(Array1<f64>, Vec<WindowProposal>)> {
        self.check_inputs(full, roi)?;
        let mut tape = Tape::new();
        let mut nodes = ParamNodes::new(&self.store, false);
        let plan = self.build_forward(&mut tape, &mut nodes, full, roi, None)?;
        Ok((tape.value1(plan.logits), plan.proposals))
    }

    /// Inference with proposals pinned by the caller.
    pub fn forward_fixed(
        &self,
        full: &ImageTensor,
        roi: &ImageTensor,
        proposals: &[WindowProposal],
    ) -> Result<Array1<f64>> {
        self.check_inputs(full, roi)?;
        let mut tape = Tape::new();
        let mut nodes = ParamNodes::new(&self.store, false);
        let plan = self.build_forward(&mut tape, &mut nodes, full, roi, Some(proposals))?;
        Ok(tape.value1(plan.logits))
    }

    /// Forward + backward for one labeled sample.
    pub fn loss_grads(
        &self,
        full: &ImageTensor,
        roi: &ImageTensor,
        label: u8,
        class_weight: f64,
        fixed: Option<&[WindowProposal]>,
    ) -> Result<SampleGrads> {
        self.check_inputs(full, roi)?;
        let mut tape = Tape::new();
        let mut nodes = ParamNodes::new(&self.store, true);
        let plan = self.build_forward(&mut tape, &mut nodes, full, roi, fixed)?;
        let loss_node = tape.cross_entropy(plan.logits, label as usize, class_weight);
        let logits = tape.value1(plan.logits);
        let loss = tape.scalar(loss_node);
        let mut backward = tape.backward(loss_node);

        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.store.len()];
        for (store_idx, node) in nodes.bound() {
            grads[store_idx] = backward.take(node);
        }
        Ok(SampleGrads { loss, logits, proposals: plan.proposals, grads })
    }
}

/// Full three-branch forward pass (spec-level entry point).
pub fn model_forward(
    full: &ImageTensor,
    roi: &ImageTensor,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<(Array1<f64>, Vec<WindowProposal>)> {
    let model = Model { config: config.clone(), store: store.clone() };
    model.forward(full, roi)
}

/// Forward pass with externally fixed proposals.
pub fn model_forward_fixed(
    full: &ImageTensor,
    roi: &ImageTensor,
    store: &ParamStore,
    config: &ModelConfig,
    proposals: &[WindowProposal],
) -> Result<Array1<f64>> {
    let model = Model { config: config.clone(), store: store.clone() };
    model.forward_fixed(full, roi, proposals)
}
