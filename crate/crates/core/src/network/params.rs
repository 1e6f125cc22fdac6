//! Named parameter storage shared by the model, optimizer, and checkpoints.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, FusionMode, ModelConfig};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Insertion-ordered map of parameter tensors. Creation order is fixed by
/// the model configuration, so optimizer state and checkpoints can address
/// parameters by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.index
            .get(name)
            .map(|i| &self.entries[*i].1)
            .ok_or_else(|| Error::invalid_argument(format!("unknown parameter {name}")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.entries[i].1
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Lazily binds store parameters to tape leaves during one forward pass,
/// remembering which store entry each leaf came from.
pub struct ParamNodes {
    nodes: Vec<Option<NodeId>>,
    needs_grad: bool,
}

impl ParamNodes {
    pub fn new(store: &ParamStore, needs_grad: bool) -> Self {
        Self { nodes: vec![None; store.len()], needs_grad }
    }

    pub fn node(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> NodeId {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let id = tape.leaf(store.value_at(idx).clone(), self.needs_grad);
        self.nodes[idx] = Some(id);
        id
    }

    /// (store index, tape node) for every bound parameter.
    pub fn bound(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|id| (i, id)))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// He-uniform for rectified layers.
fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier-uniform for linear/attention layers.
fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub(super) fn insert_cbam_params(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) {
    let red = channels / cfg.cbam_reduction;
    let k = cfg.cbam_spatial_kernel;
    store.insert(&format!("{prefix}.reduce.w"), he(&[red, channels], channels, rng));
    store.insert(&format!("{prefix}.expand.w"), he(&[channels, red], red, rng));
    store.insert(&format!("{prefix}.spatial.w"), he(&[1, 2, k, k], 2 * k * k, rng));
    store.insert(&format!("{prefix}.spatial.b"), zeros(&[1]));
}

fn insert_backbone_params(
    store: &mut ParamStore,
    branch: &str,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) {
    let ch0 = cfg.stage_channels[0];
    store.insert(&format!("{branch}.stem.w"), he(&[ch0, 3, 7, 7], 3 * 49, rng));
    store.insert(&format!("{branch}.stem.b"), zeros(&[ch0]));

    let mut in_ch = ch0;
    for (s, (&out_ch, &blocks)) in cfg
        .stage_channels
        .iter()
        .zip(cfg.blocks_per_stage.iter())
        .enumerate()
    {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("{branch}.s{s}.b{b}");
            store.insert(&format!("{p}.conv1.w"), he(&[out_ch, in_ch, 3, 3], in_ch * 9, rng));
            store.insert(&format!("{p}.conv1.b"), zeros(&[out_ch]));
            store.insert(&format!("{p}.conv2.w"), he(&[out_ch, out_ch, 3, 3], out_ch * 9, rng));
            store.insert(&format!("{p}.conv2.b"), zeros(&[out_ch]));
            if stride != 1 || in_ch != out_ch {
                store.insert(&format!("{p}.short.w"), he(&[out_ch, in_ch, 1, 1], in_ch, rng));
                store.insert(&format!("{p}.short.b"), zeros(&[out_ch]));
            }
            if cfg.cbam_enabled {
                insert_cbam_params(store, &format!("{p}.cbam"), out_ch, cfg, rng);
            }
            in_ch = out_ch;
        }
    }

    if cfg.cbam_enabled {
        insert_cbam_params(store, &format!("{branch}.post_cbam"), in_ch, cfg, rng);
    }

    let d = super::model::EMBED_DIM;
    store.insert(&format!("{branch}.embed.w"), xavier(&[d, in_ch], in_ch, d, rng));
    store.insert(&format!("{branch}.embed.b"), zeros(&[d]));
}

/// Creates every parameter of the three-branch model in a fixed order.
pub fn init_model_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for branch in ["global", "roi", "patch"] {
        insert_backbone_params(&mut store, branch, &config.backbone, &mut rng);
    }

    let d = super::model::EMBED_DIM;
    match config.fusion.mode {
        FusionMode::MhaReadout => {
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("fusion.{name}"), xavier(&[d, d], d, d, &mut rng));
                store.insert(&format!("fusion.{name}.b"), zeros(&[d]));
            }
        }
        FusionMode::ConcatLinear => {
            let n = config.fusion.token_count * d;
            store.insert("fusion.concat.w", xavier(&[2, n], n, 2, &mut rng));
            store.insert("fusion.concat.b", zeros(&[2]));
        }
    }
    store.insert("fusion.cls.w", xavier(&[2, d], d, 2, &mut rng));
    store.insert("fusion.cls.b", zeros(&[2]));
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn init_is_deterministic_and_ordered() {
        let cfg = ModelConfig::desk_default(64);
        let a = init_model_params(&cfg, 5).unwrap();
        let b = init_model_params(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = init_model_params(&cfg, 6).unwrap();
        assert_ne!(a, c);
        assert!(a.index_of("global.stem.w").is_some());
        assert!(a.index_of("patch.embed.b").is_some());
        assert!(a.index_of("fusion.cls.w").is_some());
    }

    #[test]
    fn biases_start_at_zero() {
        let cfg = ModelConfig::desk_default(64);
        let store = init_model_params(&cfg, 1).unwrap();
        for (name, value) in store.iter() {
            if name.ends_with(".b") {
                assert!(value.iter().all(|v| *v == 0.0), "{name} not zero");
            }
        }
    }
}
