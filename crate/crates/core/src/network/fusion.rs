//! Embedding fusion: multi-head self-attention readout or flat concatenation.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::params::{ParamNodes, ParamStore};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One self-attention layer with a residual connection; tokens averaged,
    /// then a linear classifier.
    MhaReadout,
    /// Concatenate all embeddings and classify linearly.
    ConcatLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Attention heads (mha mode); must divide the embedding dimension.
    pub heads: usize,
    /// Expected number of embeddings: patches + global + roi.
    pub token_count: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::MhaReadout, heads: 4, token_count: 6 }
    }
}

impl FusionConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.token_count < 2 {
            return Err(Error::validation("fusion needs at least two tokens"));
        }
        if matches!(self.mode, FusionMode::MhaReadout)
            && (self.heads == 0 || !embed_dim.is_multiple_of(self.heads))
        {
            return Err(Error::validation(format!(
                "heads ({}) must divide the embedding dimension ({embed_dim})",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Builds the fusion head on a tape from per-token embedding nodes.
pub(super) fn fusion_forward_tape(
    tape: &mut Tape,
    nodes: &mut ParamNodes,
    store: &ParamStore,
    embeddings: &[NodeId],
    cfg: &FusionConfig,
) -> NodeId {
    match cfg.mode {
        FusionMode::ConcatLinear => {
            let flat = tape.concat_vec(embeddings);
            let w = nodes.node(tape, store, "fusion.concat.w");
            let b = nodes.node(tape, store, "fusion.concat.b");
            tape.linear_vec(flat, w, b)
        }
        FusionMode::MhaReadout => {
            let tokens = tape.stack_rows(embeddings);
            let dim = tape.value(tokens).shape()[1];
            let head_dim = dim / cfg.heads;

            let proj = |t: &mut Tape, n: &mut ParamNodes, x: NodeId, name: &str| {
                let w = n.node(t, store, &format!("fusion.{name}"));
                let b = n.node(t, store, &format!("fusion.{name}.b"));
                t.linear_rows(x, w, b)
            };
            let q = proj(tape, nodes, tokens, "wq");
            let k = proj(tape, nodes, tokens, "wk");
            let v = proj(tape, nodes, tokens, "wv");

            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (from, to) = (h * head_dim, (h + 1) * head_dim);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(k, from, to);
                let vh = tape.slice_cols(v, from, to);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale_const(scores, 1.0 / (head_dim as f64).sqrt());
                let attn = tape.softmax_rows(scaled);
                heads.push(tape.matmul_nn(attn, vh));
            }
            let merged = tape.concat_cols(&heads);
            let out = proj(tape, nodes, merged, "wo");
            let residual = tape.add(tokens, out);
            let pooled = tape.mean_rows(residual);
            let w = nodes.node(tape, store, "fusion.cls.w");
            let b = nodes.node(tape, store, "fusion.cls.b");
            tape.linear_vec(pooled, w, b)
        }
    }
}

/// Fuses branch embeddings into two class logits (inference path).
pub fn fuse_and_classify(
    embeddings: &[Array1<f64>],
    store: &ParamStore,
    cfg: &FusionConfig,
) -> Result<Array1<f64>> {
    if embeddings.is_empty() {
        return Err(Error::invalid_argument("no embeddings to fuse"));
    }
    let dim = embeddings[0].len();
    cfg.validate(dim)?;
    if embeddings.len() != cfg.token_count {
        return Err(Error::invalid_argument(format!(
            "expected {} embeddings, got {}",
            cfg.token_count,
            embeddings.len()
        )));
    }
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::invalid_argument("embedding dimensions differ"));
    }

    let mut tape = Tape::new();
    let mut nodes = ParamNodes::new(store, false);
    let ids: Vec<NodeId> = embeddings
        .iter()
        .map(|e| tape.leaf(e.clone().into_dyn(), false))
        .collect();
    let logits = fusion_forward_tape(&mut tape, &mut nodes, store, &ids, cfg);
    Ok(tape.value1(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mha_store(dim: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("fusion.{name}"),
                ArrayD::from_shape_fn(IxDyn(&[dim, dim]), |_| rng.random_range(-0.5..0.5)),
            );
            store.insert(&format!("fusion.{name}.b"), ArrayD::zeros(IxDyn(&[dim])));
        }
        store.insert(
            "fusion.cls.w",
            ArrayD::from_shape_fn(IxDyn(&[2, dim]), |_| rng.random_range(-0.5..0.5)),
        );
        store.insert("fusion.cls.b", ArrayD::zeros(IxDyn(&[2])));
        store
    }

    fn random_embeddings(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
        (0..n)
            .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn concat_with_zero_weights_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 8;
        let mut store = ParamStore::new();
        store.insert("fusion.concat.w", ArrayD::zeros(IxDyn(&[2, 3 * dim])));
        store.insert(
            "fusion.concat.b",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.7, -1.2]).unwrap(),
        );
        let cfg = FusionConfig { mode: FusionMode::ConcatLinear, heads: 1, token_count: 3 };
        let embeddings = random_embeddings(3, dim, &mut rng);
        let logits = fuse_and_classify(&embeddings, &store, &cfg).unwrap();
        assert_eq!(logits[0], 0.7);
        assert_eq!(logits[1], -1.2);
    }

    #[test]
    fn mha_readout_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 8;
        let store = mha_store(dim, &mut rng);
        let cfg = FusionConfig { mode: FusionMode::MhaReadout, heads: 2, token_count: 6 };
        let embeddings = random_embeddings(6, dim, &mut rng);
        let base = fuse_and_classify(&embeddings, &store, &cfg).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<Array1<f64>> = perm.iter().map(|&i| embeddings[i].clone()).collect();
        let out = fuse_and_classify(&permuted, &store, &cfg).unwrap();
        for (a, b) in base.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_two_token_closed_form() {
        // dim 2, identity projections, zero output projection: the readout
        // reduces to mean(tokens) through the residual connection.
        let dim = 2;
        let mut store = ParamStore::new();
        let eye = Array2::<f64>::eye(dim).into_dyn();
        for name in ["wq", "wk", "wv"] {
            store.insert(&format!("fusion.{name}"), eye.clone());
            store.insert(&format!("fusion.{name}.b"), ArrayD::zeros(IxDyn(&[dim])));
        }
        store.insert("fusion.wo", ArrayD::zeros(IxDyn(&[dim, dim])));
        store.insert("fusion.wo.b", ArrayD::zeros(IxDyn(&[dim])));
        store.insert("fusion.cls.w", Array2::<f64>::eye(2).into_dyn());
        store.insert("fusion.cls.b", ArrayD::zeros(IxDyn(&[2])));

        let cfg = FusionConfig { mode: FusionMode::MhaReadout, heads: 1, token_count: 2 };
        let a = Array1::from_vec(vec![1.0, 0.0]);
        let b = Array1::from_vec(vec![0.0, 1.0]);
        let logits = fuse_and_classify(&[a.clone(), b.clone()], &store, &cfg).unwrap();
        // Zero wo kills the attention output, so logits = cls(mean(a, b)).
        assert!((logits[0] - 0.5).abs() < 1e-12);
        assert!((logits[1] - 0.5).abs() < 1e-12);

        // Now give wo weight and verify the hand-computed softmax mix.
        let mut store2 = store.clone();
        *store2.value_at_mut(store2.index_of("fusion.wo").unwrap()) = eye.clone();
        let logits2 = fuse_and_classify(&[a.clone(), b.clone()], &store2, &cfg).unwrap();
        let scale = 1.0 / (2.0f64).sqrt();
        // Row scores for token a: [a·a, a·b] * scale = [scale, 0].
        let ea = (scale).exp();
        let e0 = (0.0f64).exp();
        let attn_aa = ea / (ea + e0);
        let attn_ab = e0 / (ea + e0);
        // Symmetry: token b mirrors token a with coordinates swapped.
        let out_a = [attn_aa, attn_ab]; // attention output for token a
        let token_a = [a[0] + out_a[0], a[1] + out_a[1]];
        let token_b = [attn_ab + b[0], attn_aa + b[1]];
        let mean = [(token_a[0] + token_b[0]) / 2.0, (token_a[1] + token_b[1]) / 2.0];
        assert!((logits2[0] - mean[0]).abs() < 1e-12, "{} vs {}", logits2[0], mean[0]);
        assert!((logits2[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn wrong_token_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = mha_store(8, &mut rng);
        let cfg = FusionConfig { mode: FusionMode::MhaReadout, heads: 2, token_count: 6 };
        let embeddings = random_embeddings(5, 8, &mut rng);
        assert!(fuse_and_classify(&embeddings, &store, &cfg).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = mha_store(8, &mut rng);
        let cfg = FusionConfig { mode: FusionMode::MhaReadout, heads: 3, token_count: 2 };
        let embeddings = random_embeddings(2, 8, &mut rng);
        assert!(fuse_and_classify(&embeddings, &store, &cfg).is_err());
    }
}
