//! CBAM attention: channel attention (pooled-descriptor MLP) and spatial
//! attention (channel-pooled convolution), applied sequentially.
//!
//! Two routes exist on purpose: the plain functions here implement the
//! contract directly with loops, while [`cbam_forward_tape`] builds the same
//! computation on an autodiff [`Tape`] for training. Tests hold the two
//! routes equal and check tape gradients against finite differences.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::FeatureMap;

/// Shared-MLP channel attention parameters (no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    /// C×(C/r): descriptor → reduced.
    pub reduce_weights: Array2<f64>,
    /// (C/r)×C: reduced → per-channel logits.
    pub expand_weights: Array2<f64>,
}

impl ChannelAttentionParams {
    pub fn new(reduce_weights: Array2<f64>, expand_weights: Array2<f64>) -> Result<Self> {
        let (c, red) = reduce_weights.dim();
        if red == 0 || c == 0 || c % red != 0 {
            return Err(Error::invalid_argument(
                "reduction must divide the channel count",
            ));
        }
        if expand_weights.dim() != (red, c) {
            return Err(Error::invalid_argument(format!(
                "expand weights must be {red}x{c}, got {:?}",
                expand_weights.dim()
            )));
        }
        Ok(Self { reduce_weights, expand_weights })
    }

    pub fn channels(&self) -> usize {
        self.reduce_weights.dim().0
    }

    pub fn reduction(&self) -> usize {
        self.channels() / self.reduce_weights.dim().1
    }
}

/// Spatial attention parameters: a 2×k×k kernel over the stacked
/// channel-mean/channel-max maps, plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    pub conv_kernel: Array3<f64>,
    pub bias: f64,
}

impl SpatialAttentionParams {
    pub fn new(conv_kernel: Array3<f64>, bias: f64) -> Result<Self> {
        let (two, kh, kw) = conv_kernel.dim();
        if two != 2 || kh != kw || kh % 2 == 0 {
            return Err(Error::invalid_argument(
                "spatial kernel must be 2xkxk with odd k",
            ));
        }
        Ok(Self { conv_kernel, bias })
    }

    pub fn kernel_side(&self) -> usize {
        self.conv_kernel.dim().1
    }
}

/// w = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))), every weight in (0,1).
pub fn channel_attention(fmap: &FeatureMap, params: &ChannelAttentionParams) -> Result<Array1<f64>> {
    let (c, h, w) = fmap.data().dim();
    if c != params.channels() {
        return Err(Error::invalid_argument(format!(
            "feature map has {c} channels but params expect {}",
            params.channels()
        )));
    }
    let mut avg = Array1::<f64>::zeros(c);
    let mut max = Array1::<f64>::from_elem(c, f64::NEG_INFINITY);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = fmap.data()[[ci, y, x]];
                avg[ci] += v;
                if v > max[ci] {
                    max[ci] = v;
                }
            }
        }
        avg[ci] /= (h * w) as f64;
    }

    let mlp = |d: &Array1<f64>| -> Array1<f64> {
        let red = params.reduce_weights.dim().1;
        let mut hidden = Array1::<f64>::zeros(red);
        for j in 0..red {
            let mut acc = 0.0;
            for i in 0..c {
                acc += d[i] * params.reduce_weights[[i, j]];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut out = Array1::<f64>::zeros(c);
        for k in 0..c {
            let mut acc = 0.0;
            for j in 0..red {
                acc += hidden[j] * params.expand_weights[[j, k]];
            }
            out[k] = acc;
        }
        out
    };

    let logits = mlp(&avg) + mlp(&max);
    Ok(logits.mapv(sigmoid))
}

/// Stacks channel-mean and channel-max maps, convolves (stride 1, zero
/// padding), applies the sigmoid. Spatial size is preserved.
pub fn spatial_attention(fmap: &FeatureMap, params: &SpatialAttentionParams) -> Result<Array2<f64>> {
    let (c, h, w) = fmap.data().dim();
    let k = params.kernel_side();
    let pad = (k / 2) as isize;

    let mut mean = Array2::<f64>::zeros((h, w));
    let mut max = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = fmap.data()[[ci, y, x]];
                mean[[y, x]] += v;
                if v > max[[y, x]] {
                    max[[y, x]] = v;
                }
            }
        }
    }
    mean.mapv_inplace(|v| v / c as f64);

    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = params.bias;
            for ky in 0..k {
                for kx in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    let sx = x as isize + kx as isize - pad;
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    acc += params.conv_kernel[[0, ky, kx]] * mean[[sy, sx]];
                    acc += params.conv_kernel[[1, ky, kx]] * max[[sy, sx]];
                }
            }
            out[[y, x]] = sigmoid(acc);
        }
    }
    Ok(out)
}

/// Sequential CBAM: F′ = F ⊙ w_c, F″ = F′ ⊙ w_s(F′).
pub fn cbam_apply(
    fmap: &FeatureMap,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
) -> Result<FeatureMap> {
    let wc = channel_attention(fmap, cp)?;
    let mut refined = fmap.data().clone();
    for ci in 0..refined.dim().0 {
        let s = wc[ci];
        refined.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v * s);
    }
    let refined = FeatureMap::new(refined)?;
    let ws = spatial_attention(&refined, sp)?;
    let mut out = refined.into_inner();
    for ci in 0..out.dim().0 {
        out.index_axis_mut(ndarray::Axis(0), ci)
            .zip_mut_with(&ws, |v, &s| *v *= s);
    }
    FeatureMap::new(out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tape parameter handles for one CBAM block.
///
/// Dense weights use the tape's (out, in) orientation: `reduce_w` is
/// (C/r)×C ( = spec reduce transposed) and `expand_w` is C×(C/r).
#[derive(Debug, Clone, Copy)]
pub struct CbamNodes {
    pub reduce_w: NodeId,
    pub expand_w: NodeId,
    /// Spatial conv kernel, shape (1, 2, k, k).
    pub spatial_w: NodeId,
    /// Spatial conv bias, shape (1).
    pub spatial_b: NodeId,
}

/// Builds the CBAM forward pass on a tape; numerically identical to
/// [`cbam_apply`].
pub fn cbam_forward_tape(tape: &mut Tape, x: NodeId, nodes: &CbamNodes) -> NodeId {
    let red = tape.value(nodes.reduce_w).shape()[0];
    let c = tape.value(nodes.reduce_w).shape()[1];
    let zero_red = tape.leaf(ArrayD::zeros(IxDyn(&[red])), false);
    let zero_c = tape.leaf(ArrayD::zeros(IxDyn(&[c])), false);

    let gap = tape.global_avg_pool(x);
    let gmp = tape.global_max_pool(x);
    let branch = |t: &mut Tape, d: NodeId| -> NodeId {
        let hidden = t.linear_vec(d, nodes.reduce_w, zero_red);
        let hidden = t.relu(hidden);
        t.linear_vec(hidden, nodes.expand_w, zero_c)
    };
    let e_avg = branch(tape, gap);
    let e_max = branch(tape, gmp);
    let logits = tape.add(e_avg, e_max);
    let wc = tape.sigmoid(logits);
    let x1 = tape.scale_channels(x, wc);

    let k = tape.value(nodes.spatial_w).shape()[2];
    let mean = tape.channel_mean(x1);
    let max = tape.channel_max(x1);
    let stacked = tape.stack2(mean, max);
    let conv = tape.conv2d(stacked, nodes.spatial_w, nodes.spatial_b, 1, k / 2);
    let sig = tape.sigmoid(conv);
    let ws = tape.channel_mean(sig); // squeeze the single channel
    tape.scale_spatial(x1, ws)
}
