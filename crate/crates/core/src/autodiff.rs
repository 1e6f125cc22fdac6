//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`]
//! replays them in reverse, accumulating gradients for every node that
//! requires them. The op set is exactly what the network needs: convolution,
//! pooling, attention arithmetic, and the classification loss. All math is
//! sequential and deterministic.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};

pub type NodeId = usize;

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Backward>>,
    needs_grad: bool,
}

/// Per-op reverse rule: maps the output gradient to parent gradients.
trait Backward {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>>;
}

/// Gradients keyed by node id, populated for leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn value3(&self, id: NodeId) -> Array3<f64> {
        self.nodes[id]
            .value
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("node is not 3-d")
    }

    pub fn value1(&self, id: NodeId) -> Array1<f64> {
        self.nodes[id]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("node is not 1-d")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.nodes[id].value.first().expect("empty node value")
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        op: Option<Box<dyn Backward>>,
    ) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[*p].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        // Ops index leaf values as contiguous slices.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, parents: Vec::new(), op: None, needs_grad });
        self.nodes.len() - 1
    }

    /// Runs the reverse pass from a scalar root. Returns gradients for every
    /// leaf with `needs_grad`; intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue; // leaf: keep its gradient for the caller
            };
            let grad = grads[id].take().expect("checked above");
            let inputs: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|p| &self.nodes[*p].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[*p].needs_grad).collect();
            let parent_grads = op.backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    match grads[*p].as_mut() {
                        Some(acc) => *acc += &pg,
                        None => grads[*p] = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2d {
    stride: usize,
    pad: usize,
    kernel: usize,
}

fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

fn im2col(x: &ArrayD<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(w, k, stride, pad);
    let mut col = Array2::<f64>::zeros((ci * k * k, ho * wo));
    let xs = x.as_slice().expect("contiguous input");
    let cols = col.as_slice_mut().expect("contiguous col");
    let spatial = ho * wo;
    for ciy in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ciy * k + ky) * k + kx;
                let out_base = row * spatial;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src_base = (ciy * h + y as usize) * w;
                    let dst_base = out_base + oy * wo;
                    // Valid ox range so that 0 <= ox*stride + kx - pad < w.
                    let (ox0, ox1) = valid_range(wo, w, stride, kx, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut src = ox0 * stride + kx - pad;
                    for ox in ox0..ox1 {
                        cols[dst_base + ox] = xs[src_base + src];
                        src += stride;
                    }
                }
            }
        }
    }
    col
}

/// First and one-past-last output indices whose source column is in-bounds.
fn valid_range(out_len: usize, src_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi_excl = if src_len + pad > offset {
        ((src_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi_excl)
}

fn col2im(
    gcol: &Array2<f64>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (ci, h, w) = shape;
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(w, k, stride, pad);
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[ci, h, w]));
    let gxs = gx.as_slice_mut().expect("contiguous grad");
    let gcols = gcol.as_slice().expect("contiguous col grad");
    let spatial = ho * wo;
    for ciy in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ciy * k + ky) * k + kx;
                let in_base = row * spatial;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_base = (ciy * h + y as usize) * w;
                    let src_base = in_base + oy * wo;
                    let (ox0, ox1) = valid_range(wo, w, stride, kx, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut dst = ox0 * stride + kx - pad;
                    for ox in ox0..ox1 {
                        gxs[dst_base + dst] += gcols[src_base + ox];
                        dst += stride;
                    }
                }
            }
        }
    }
    gx
}

impl Backward for Conv2d {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let co = w.shape()[0];
        let cikk = w.shape()[1] * w.shape()[2] * w.shape()[3];
        let spatial = grad.len() / co;
        let gmat = ArrayView2::from_shape((co, spatial), grad.as_slice().unwrap()).unwrap();
        let wmat = ArrayView2::from_shape((co, cikk), w.as_slice().unwrap()).unwrap();

        let gx = if needs[0] {
            let gcol = wmat.t().dot(&gmat);
            Some(col2im(
                &gcol,
                (x.shape()[0], x.shape()[1], x.shape()[2]),
                self.kernel,
                self.stride,
                self.pad,
            ))
        } else {
            None
        };
        let gw = if needs[1] {
            let col = im2col(x, self.kernel, self.stride, self.pad);
            let gw = gmat.dot(&col.t());
            // dot may return stride-degenerate arrays when a dim is 1; copy
            // in logical order before reshaping.
            let flat: Vec<f64> = gw.iter().copied().collect();
            Some(ArrayD::from_shape_vec(w.raw_dim(), flat).unwrap())
        } else {
            None
        };
        let gb = if needs[2] {
            Some(gmat.sum_axis(Axis(1)).into_dyn())
        } else {
            None
        };
        vec![gx, gw, gb]
    }
}

// ---------------------------------------------------------------------------
// Elementwise / pooling ops
// ---------------------------------------------------------------------------

struct Relu;
impl Backward for Relu {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |gv, &xv| {
            if xv <= 0.0 {
                *gv = 0.0;
            }
        });
        vec![Some(g)]
    }
}

struct Sigmoid;
impl Backward for Sigmoid {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut g = grad.clone();
        g.zip_mut_with(output, |gv, &yv| *gv *= yv * (1.0 - yv));
        vec![Some(g)]
    }
}

struct Add;
impl Backward for Add {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

struct ScaleConst(f64);
impl Backward for ScaleConst {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(grad * self.0)]
    }
}

struct MaxPool2d {
    argmax: Vec<usize>,
}
impl Backward for MaxPool2d {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        let gxs = gx.as_slice_mut().unwrap();
        for (g, &src) in grad.iter().zip(self.argmax.iter()) {
            gxs[src] += g;
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgPool;
impl Backward for GlobalAvgPool {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (c, h, w) = (inputs[0].shape()[0], inputs[0].shape()[1], inputs[0].shape()[2]);
        let inv = 1.0 / (h * w) as f64;
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        for ci in 0..c {
            let gv = grad[[ci]] * inv;
            gx.index_axis_mut(Axis(0), ci).fill(gv);
        }
        vec![Some(gx)]
    }
}

struct GlobalMaxPool {
    argmax: Vec<usize>,
}
impl Backward for GlobalMaxPool {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        let gxs = gx.as_slice_mut().unwrap();
        for (ci, &src) in self.argmax.iter().enumerate() {
            gxs[src] += grad[[ci]];
        }
        vec![Some(gx)]
    }
}

struct ChannelMean;
impl Backward for ChannelMean {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let c = inputs[0].shape()[0];
        let inv = 1.0 / c as f64;
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        for ci in 0..c {
            let mut plane = gx.index_axis_mut(Axis(0), ci);
            plane.zip_mut_with(grad, |p, &g| *p = g * inv);
        }
        vec![Some(gx)]
    }
}

struct ChannelMax {
    argmax: Vec<usize>, // channel index per (h, w) cell
}
impl Backward for ChannelMax {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let plane = inputs[0].shape()[1] * inputs[0].shape()[2];
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        let gxs = gx.as_slice_mut().unwrap();
        let gs = grad.as_slice().unwrap();
        for (i, (&c, &g)) in self.argmax.iter().zip(gs).enumerate() {
            gxs[c * plane + i] += g;
        }
        vec![Some(gx)]
    }
}

struct Stack2;
impl Backward for Stack2 {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let take = |i: usize| grad.index_axis(Axis(0), i).to_owned().into_dyn();
        vec![needs[0].then(|| take(0)), needs[1].then(|| take(1))]
    }
}

struct ScaleChannels;
impl Backward for ScaleChannels {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let c = x.shape()[0];
        let gx = if needs[0] {
            let mut gx = grad.clone();
            for ci in 0..c {
                let scale = w[[ci]];
                gx.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * scale);
            }
            Some(gx)
        } else {
            None
        };
        let gw = if needs[1] {
            let mut gw = ArrayD::<f64>::zeros(w.raw_dim());
            for ci in 0..c {
                let plane_g = grad.index_axis(Axis(0), ci);
                let plane_x = x.index_axis(Axis(0), ci);
                gw[[ci]] = plane_g.iter().zip(plane_x.iter()).map(|(a, b)| a * b).sum();
            }
            Some(gw)
        } else {
            None
        };
        vec![gx, gw]
    }
}

struct ScaleSpatial;
impl Backward for ScaleSpatial {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (x, m) = (inputs[0], inputs[1]);
        let c = x.shape()[0];
        let gx = if needs[0] {
            let mut gx = grad.clone();
            for ci in 0..c {
                gx.index_axis_mut(Axis(0), ci).zip_mut_with(m, |g, &mv| *g *= mv);
            }
            Some(gx)
        } else {
            None
        };
        let gm = if needs[1] {
            let mut gm = ArrayD::<f64>::zeros(m.raw_dim());
            for ci in 0..c {
                let plane_g = grad.index_axis(Axis(0), ci);
                let plane_x = x.index_axis(Axis(0), ci);
                gm.zip_mut_with(&(&plane_g * &plane_x), |acc, &v| *acc += v);
            }
            Some(gm)
        } else {
            None
        };
        vec![gx, gm]
    }
}

// ---------------------------------------------------------------------------
// Dense / attention ops
// ---------------------------------------------------------------------------

struct LinearVec;
impl Backward for LinearVec {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let x = inputs[0].view().into_dimensionality::<Ix1>().unwrap();
        let w = as2(inputs[1]);
        let g = grad.view().into_dimensionality::<Ix1>().unwrap();
        let gx = needs[0].then(|| w.t().dot(&g).into_dyn());
        let gw = needs[1].then(|| {
            let mut gw = Array2::<f64>::zeros((w.nrows(), w.ncols()));
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    gw[[i, j]] = g[i] * x[j];
                }
            }
            gw.into_dyn()
        });
        let gb = needs[2].then(|| g.to_owned().into_dyn());
        vec![gx, gw, gb]
    }
}

struct LinearRows;
impl Backward for LinearRows {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let x = as2(inputs[0]);
        let w = as2(inputs[1]);
        let g = as2(grad);
        let gx = needs[0].then(|| g.dot(&w).into_dyn());
        let gw = needs[1].then(|| g.t().dot(&x).into_dyn());
        let gb = needs[2].then(|| g.sum_axis(Axis(0)).into_dyn());
        vec![gx, gw, gb]
    }
}

struct MatmulNn;
impl Backward for MatmulNn {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (a, b) = (as2(inputs[0]), as2(inputs[1]));
        let g = as2(grad);
        vec![
            needs[0].then(|| g.dot(&b.t()).into_dyn()),
            needs[1].then(|| a.t().dot(&g).into_dyn()),
        ]
    }
}

struct MatmulNt;
impl Backward for MatmulNt {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (a, b) = (as2(inputs[0]), as2(inputs[1]));
        let g = as2(grad);
        vec![
            needs[0].then(|| g.dot(&b).into_dyn()),
            needs[1].then(|| g.t().dot(&a).into_dyn()),
        ]
    }
}

struct SoftmaxRows;
impl Backward for SoftmaxRows {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let y = as2(output);
        let g = as2(grad);
        let mut gx = Array2::<f64>::zeros((y.nrows(), y.ncols()));
        for r in 0..y.nrows() {
            let dot: f64 = g.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| a * b).sum();
            for c in 0..y.ncols() {
                gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct MeanRows;
impl Backward for MeanRows {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let (t, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let inv = 1.0 / t as f64;
        let mut gx = Array2::<f64>::zeros((t, d));
        for r in 0..t {
            for c in 0..d {
                gx[[r, c]] = grad[[c]] * inv;
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct StackRows;
impl Backward for StackRows {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        (0..inputs.len())
            .map(|i| needs[i].then(|| grad.index_axis(Axis(0), i).to_owned().into_dyn()))
            .collect()
    }
}

struct SliceCols {
    from: usize,
    to: usize,
}
impl Backward for SliceCols {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        gx.slice_mut(ndarray::s![.., self.from..self.to])
            .assign(&as2(grad));
        vec![Some(gx)]
    }
}

struct ConcatCols {
    widths: Vec<usize>,
}
impl Backward for ConcatCols {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let g = as2(grad);
        let mut out = Vec::with_capacity(self.widths.len());
        let mut offset = 0;
        for (i, &wd) in self.widths.iter().enumerate() {
            out.push(needs[i].then(|| g.slice(ndarray::s![.., offset..offset + wd]).to_owned().into_dyn()));
            offset += wd;
        }
        out
    }
}

struct ConcatVec {
    lengths: Vec<usize>,
}
impl Backward for ConcatVec {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let g = grad.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Vec::with_capacity(self.lengths.len());
        let mut offset = 0;
        for (i, &len) in self.lengths.iter().enumerate() {
            out.push(needs[i].then(|| g.slice(ndarray::s![offset..offset + len]).to_owned().into_dyn()));
            offset += len;
        }
        out
    }
}

struct CrossEntropy {
    target: usize,
    weight: f64,
}
impl Backward for CrossEntropy {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let logits = inputs[0].view().into_dimensionality::<Ix1>().unwrap();
        let g = *grad.first().unwrap();
        let probs = softmax1(&logits.to_owned());
        let mut gl = probs;
        gl[self.target] -= 1.0;
        gl.mapv_inplace(|v| v * g * self.weight);
        vec![Some(gl.into_dyn())]
    }
}

struct WeightedSum {
    weights: ArrayD<f64>,
}
impl Backward for WeightedSum {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
        _needs: &[bool],
    ) -> Vec<Option<ArrayD<f64>>> {
        let g = *grad.first().unwrap();
        vec![Some(&self.weights * g)]
    }
}

fn softmax1(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

// ---------------------------------------------------------------------------
// Forward builders
// ---------------------------------------------------------------------------

impl Tape {
    /// 2-d convolution over a (Ci,H,W) input with an (Co,Ci,k,k) kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        debug_assert_eq!(wv.shape()[1], xv.shape()[0], "channel mismatch");
        let ho = conv_out_side(xv.shape()[1], k, stride, pad);
        let wo = conv_out_side(xv.shape()[2], k, stride, pad);

        let col = im2col(xv, k, stride, pad);
        let cikk = wv.shape()[1] * k * k;
        let wmat = ArrayView2::from_shape((co, cikk), wv.as_slice().unwrap()).unwrap();
        let mut out = wmat.dot(&col);
        for (mut row, bias) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let flat: Vec<f64> = if out.is_standard_layout() {
            out.into_raw_vec_and_offset().0
        } else {
            out.iter().copied().collect()
        };
        let value = ArrayD::from_shape_vec(IxDyn(&[co, ho, wo]), flat).unwrap();
        self.push(value, vec![x, w, b], Some(Box::new(Conv2d { stride, pad, kernel: k })))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(value, vec![x], Some(Box::new(Relu)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, vec![x], Some(Box::new(Sigmoid)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(value, vec![a, b], Some(Box::new(Add)))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[x].value * c;
        self.push(value, vec![x], Some(Box::new(ScaleConst(c))))
    }

    /// Max pooling with implicit -inf padding.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let ho = conv_out_side(h, k, stride, pad);
        let wo = conv_out_side(w, k, stride, pad);
        let xs = xv.as_slice().unwrap();
        let mut value = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
        let vs = value.as_slice_mut().unwrap();
        let mut argmax = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                let out_base = (ci * ho + oy) * wo;
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row_base = (ci * h + y as usize) * w;
                        for kx in 0..k {
                            let xc = (ox * stride + kx) as isize - pad as isize;
                            if xc < 0 || xc >= w as isize {
                                continue;
                            }
                            let idx = row_base + xc as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    vs[out_base + ox] = best;
                    argmax[out_base + ox] = best_idx;
                }
            }
        }
        self.push(value, vec![x], Some(Box::new(MaxPool2d { argmax })))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let c = xv.shape()[0];
        let inv = 1.0 / (xv.shape()[1] * xv.shape()[2]) as f64;
        let mut value = ArrayD::<f64>::zeros(IxDyn(&[c]));
        for ci in 0..c {
            value[[ci]] = xv.index_axis(Axis(0), ci).sum() * inv;
        }
        self.push(value, vec![x], Some(Box::new(GlobalAvgPool)))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xs = xv.as_slice().unwrap();
        let mut value = ArrayD::<f64>::zeros(IxDyn(&[c]));
        let mut argmax = vec![0usize; c];
        for ci in 0..c {
            let base = ci * h * w;
            let (mut best, mut best_idx) = (f64::NEG_INFINITY, base);
            for (i, &v) in xs[base..base + h * w].iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = base + i;
                }
            }
            value[[ci]] = best;
            argmax[ci] = best_idx;
        }
        self.push(value, vec![x], Some(Box::new(GlobalMaxPool { argmax })))
    }

    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let value = xv.mean_axis(Axis(0)).unwrap();
        self.push(value, vec![x], Some(Box::new(ChannelMean)))
    }

    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xs = xv.as_slice().unwrap();
        let plane = h * w;
        let mut value = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
        let vs = value.as_slice_mut().unwrap();
        let mut argmax = vec![0usize; plane];
        vs.copy_from_slice(&xs[..plane]);
        for ci in 1..c {
            let base = ci * plane;
            for i in 0..plane {
                if xs[base + i] > vs[i] {
                    vs[i] = xs[base + i];
                    argmax[i] = ci;
                }
            }
        }
        self.push(value, vec![x], Some(Box::new(ChannelMax { argmax })))
    }

    pub fn stack2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (h, w) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
        let mut value = ArrayD::<f64>::zeros(IxDyn(&[2, h, w]));
        value.index_axis_mut(Axis(0), 0).assign(&self.nodes[a].value);
        value.index_axis_mut(Axis(0), 1).assign(&self.nodes[b].value);
        self.push(value, vec![a, b], Some(Box::new(Stack2)))
    }

    pub fn scale_channels(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let mut value = xv.clone();
        for ci in 0..xv.shape()[0] {
            let s = wv[[ci]];
            value.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * s);
        }
        self.push(value, vec![x, w], Some(Box::new(ScaleChannels)))
    }

    pub fn scale_spatial(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mv = &self.nodes[m].value;
        let mut value = xv.clone();
        for ci in 0..xv.shape()[0] {
            value.index_axis_mut(Axis(0), ci).zip_mut_with(mv, |v, &s| *v *= s);
        }
        self.push(value, vec![x, m], Some(Box::new(ScaleSpatial)))
    }

    /// y = W x + b for a 1-d input.
    pub fn linear_vec(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix1>().unwrap();
        let wv = as2(&self.nodes[w].value);
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let value = (wv.dot(&xv) + bv).into_dyn();
        self.push(value, vec![x, w, b], Some(Box::new(LinearVec)))
    }

    /// Y = X Wᵀ + b applied to every row of a (T,n) input.
    pub fn linear_rows(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let wv = as2(&self.nodes[w].value);
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.dot(&wv.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &bv;
        }
        self.push(out.into_dyn(), vec![x, w, b], Some(Box::new(LinearRows)))
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = as2(&self.nodes[a].value).dot(&as2(&self.nodes[b].value)).into_dyn();
        self.push(value, vec![a, b], Some(Box::new(MatmulNn)))
    }

    /// A·Bᵀ.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = as2(&self.nodes[a].value)
            .dot(&as2(&self.nodes[b].value).t())
            .into_dyn();
        self.push(value, vec![a, b], Some(Box::new(MatmulNt)))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let mut out = xv.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), vec![x], Some(Box::new(SoftmaxRows)))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let value = as2(&self.nodes[x].value).mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(value, vec![x], Some(Box::new(MeanRows)))
    }

    pub fn stack_rows(&mut self, xs: &[NodeId]) -> NodeId {
        let d = self.nodes[xs[0]].value.len();
        let mut value = Array2::<f64>::zeros((xs.len(), d));
        for (i, &id) in xs.iter().enumerate() {
            value
                .row_mut(i)
                .assign(&self.nodes[id].value.view().into_dimensionality::<Ix1>().unwrap());
        }
        self.push(value.into_dyn(), xs.to_vec(), Some(Box::new(StackRows)))
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let value = as2(&self.nodes[x].value)
            .slice(ndarray::s![.., from..to])
            .to_owned()
            .into_dyn();
        self.push(value, vec![x], Some(Box::new(SliceCols { from, to })))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        let t = self.nodes[xs[0]].value.shape()[0];
        let widths: Vec<usize> = xs.iter().map(|&id| self.nodes[id].value.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::<f64>::zeros((t, total));
        let mut offset = 0;
        for (&id, &wd) in xs.iter().zip(&widths) {
            value
                .slice_mut(ndarray::s![.., offset..offset + wd])
                .assign(&as2(&self.nodes[id].value));
            offset += wd;
        }
        self.push(value.into_dyn(), xs.to_vec(), Some(Box::new(ConcatCols { widths })))
    }

    pub fn concat_vec(&mut self, xs: &[NodeId]) -> NodeId {
        let lengths: Vec<usize> = xs.iter().map(|&id| self.nodes[id].value.len()).collect();
        let total: usize = lengths.iter().sum();
        let mut value = Array1::<f64>::zeros(total);
        let mut offset = 0;
        for (&id, &len) in xs.iter().zip(&lengths) {
            value
                .slice_mut(ndarray::s![offset..offset + len])
                .assign(&self.nodes[id].value.view().into_dimensionality::<Ix1>().unwrap());
            offset += len;
        }
        self.push(value.into_dyn(), xs.to_vec(), Some(Box::new(ConcatVec { lengths })))
    }

    /// Weighted cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize, weight: f64) -> NodeId {
        let lv = self.nodes[logits].value.view().into_dimensionality::<Ix1>().unwrap();
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.mapv(|v| (v - m).exp()).sum().ln();
        let loss = weight * (lse - lv[target]);
        let value = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(value, vec![logits], Some(Box::new(CrossEntropy { target, weight })))
    }

    /// Scalar objective sum(x ⊙ weights) for gradient testing.
    pub fn weighted_sum(&mut self, x: NodeId, weights: ArrayD<f64>) -> NodeId {
        let v: f64 = self.nodes[x]
            .value
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), v);
        self.push(value, vec![x], Some(Box::new(WeightedSum { weights })))
    }
}
