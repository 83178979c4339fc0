//! Minimal reverse-mode differentiation engine over the operators the
//! pipeline needs: reflection-padded convolution, ReLU, residual blocks,
//! channel concatenation, bilinear zoom, subsampling, masked L1, bilinear
//! splatting, and the temporal pooling statistics.
//!
//! Nodes live on a tape in topological order; `backward` walks it in reverse
//! and accumulates gradients into every node that requires them. Values are
//! kept alive on the tape, so each op's backward can recompute what it needs
//! without checkpointing.

use crate::image::reflect_index;
use crate::net::tensor::Tensor;
use crate::splat::{
    pool_avg, pool_avg_backward, pool_max, pool_max_backward, pool_std, pool_std_backward,
    pool_wsum, pool_wsum_backward, spmc_backward_dense, spmc_splat_dense, FeatureStack,
    SplatResult,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    PadReflect { x: NodeId, r: usize },
    ConvValid { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    ConcatC { xs: Vec<NodeId> },
    BilinearZoom { x: NodeId, s: usize },
    Subsample { x: NodeId, factor: usize, phase: (usize, usize) },
    L1 { pred: NodeId, target: Tensor, border: usize },
    Splat { x: NodeId, fx: Vec<f64>, fy: Vec<f64>, s: usize },
    PoolAvg { v: NodeId, w: NodeId },
    PoolMax { v: NodeId },
    PoolStd { v: NodeId },
    PoolWsum { w: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by node id after a backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by an op");
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input node; `requires_grad` marks parameters and anything else whose
    /// gradient is wanted.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Mirror-without-repeat padding by `r` on both spatial axes.
    pub fn pad_reflect(&mut self, x: NodeId, r: usize) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        assert!(r < h && r < w, "padding radius too large");
        let (oh, ow) = (h + 2 * r, w + 2 * r);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for in_ in 0..n {
            for ic in 0..c {
                for oy in 0..oh {
                    let sy = reflect_index(oy as isize - r as isize, h);
                    let src = xv.off(in_, ic, sy, 0);
                    let dst = out.off(in_, ic, oy, 0);
                    for ox in 0..ow {
                        let sx = reflect_index(ox as isize - r as isize, w);
                        out.data[dst + ox] = xv.data[src + sx];
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::PadReflect { x, r }, rg)
    }

    /// Valid cross-correlation with weights `[co, ci, kh, kw]` plus optional
    /// bias `[1, co, 1, 1]`.
    pub fn conv_valid(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let out = conv_valid_fwd(
            self.value(x),
            self.value(w),
            b.map(|bid| self.value(bid)),
        );
        let rg = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(out, Op::ConvValid { x, w, b }, rg)
    }

    /// Reflection-padded "same" convolution for odd kernels.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let k = self.value(w).shape[2];
        assert_eq!(k % 2, 1, "conv2d expects an odd kernel");
        let padded = self.pad_reflect(x, k / 2);
        self.conv_valid(padded, w, b)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let rg = self.needs(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect(),
        };
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let [n, _, h, w] = self.value(xs[0]).shape;
        let mut c_total = 0;
        for &id in xs {
            let s = self.value(id).shape;
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
            c_total += s[1];
        }
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let plane = h * w;
        for in_ in 0..n {
            let mut c_off = 0;
            for &id in xs {
                let v = self.value(id);
                let ci = v.shape[1];
                let src = v.off(in_, 0, 0, 0);
                let dst = out.off(in_, c_off, 0, 0);
                out.data[dst..dst + ci * plane].copy_from_slice(&v.data[src..src + ci * plane]);
                c_off += ci;
            }
        }
        let rg = xs.iter().any(|&id| self.needs(id));
        self.push(out, Op::ConcatC { xs: xs.to_vec() }, rg)
    }

    /// Bilinear upscaling by `s`, origin-aligned, reflected borders.
    pub fn bilinear_zoom(&mut self, x: NodeId, s: usize) -> NodeId {
        assert!(s >= 1);
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        let (oh, ow) = (h * s, w * s);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for in_ in 0..n {
            for ic in 0..c {
                for oy in 0..oh {
                    let (y0, y1, ty) = zoom_taps(oy, s, h);
                    for ox in 0..ow {
                        let (x0, x1, tx) = zoom_taps(ox, s, w);
                        let v = (1.0 - ty)
                            * ((1.0 - tx) * xv.at(in_, ic, y0, x0) + tx * xv.at(in_, ic, y0, x1))
                            + ty * ((1.0 - tx) * xv.at(in_, ic, y1, x0)
                                + tx * xv.at(in_, ic, y1, x1));
                        let o = out.off(in_, ic, oy, ox);
                        out.data[o] = v;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::BilinearZoom { x, s }, rg)
    }

    /// Keep one pixel every `factor` starting at `phase`; output dims are the
    /// floor division of the input dims.
    pub fn subsample(&mut self, x: NodeId, factor: usize, phase: (usize, usize)) -> NodeId {
        assert!(factor >= 1 && phase.0 < factor && phase.1 < factor);
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        let (oh, ow) = (h / factor, w / factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for in_ in 0..n {
            for ic in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = out.off(in_, ic, oy, ox);
                        out.data[o] = xv.at(in_, ic, factor * oy + phase.1, factor * ox + phase.0);
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Subsample { x, factor, phase }, rg)
    }

    /// Mean absolute deviation from `target` over pixels at least `border`
    /// away from the spatial edges. Scalar output.
    pub fn l1_masked(&mut self, pred: NodeId, target: Tensor, border: usize) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape, target.shape, "l1 target shape mismatch");
        let [n, c, h, w] = pv.shape;
        assert!(2 * border < h && 2 * border < w, "border leaves no pixels");
        let count = (n * c * (h - 2 * border) * (w - 2 * border)) as f64;
        let mut acc = 0.0;
        for in_ in 0..n {
            for ic in 0..c {
                for y in border..h - border {
                    for x in border..w - border {
                        acc += (pv.at(in_, ic, y, x) - target.at(in_, ic, y, x)).abs();
                    }
                }
            }
        }
        let rg = self.needs(pred);
        self.push(Tensor::scalar(acc / count), Op::L1 { pred, target, border }, rg)
    }

    /// Bilinear splat of `[m, c, h, w]` features by per-frame dense flows
    /// onto the x`s` grid. Returns (values, weights); the weight map does not
    /// depend on the feature values and is recorded as a constant.
    pub fn splat(&mut self, x: NodeId, fx: Vec<f64>, fy: Vec<f64>, s: usize) -> (NodeId, NodeId) {
        let xv = self.value(x);
        let stack = stack_view(xv);
        let result = spmc_splat_dense(&stack, &fx, &fy, s);
        let [m, c, ..] = xv.shape;
        let values = Tensor::from_vec([m, c, result.height, result.width], result.values);
        let weights = Tensor::from_vec([m, 1, result.height, result.width], result.weights);
        let rg = self.needs(x);
        let vid = self.push(values, Op::Splat { x, fx, fy, s }, rg);
        let wid = self.constant(weights);
        (vid, wid)
    }

    /// Weighted temporal average with 0/0 resolved to 0; `[1, c, h, w]`.
    pub fn pool_avg(&mut self, v: NodeId, w: NodeId) -> NodeId {
        let (m, c, plane, hw) = pool_dims(self.value(v), self.value(w));
        let wsum = pool_wsum(&self.value(w).data, m, plane);
        let avg = pool_avg(&self.value(v).data, &wsum, m, c, plane);
        let rg = self.needs(v) || self.needs(w);
        self.push(Tensor::from_vec([1, c, hw.0, hw.1], avg), Op::PoolAvg { v, w }, rg)
    }

    /// Per-pixel maximum over frames of the raw splatted values.
    pub fn pool_max(&mut self, v: NodeId) -> NodeId {
        let vv = self.value(v);
        let [m, c, h, w] = vv.shape;
        let out = pool_max(&vv.data, m, c, h * w);
        let rg = self.needs(v);
        self.push(Tensor::from_vec([1, c, h, w], out), Op::PoolMax { v }, rg)
    }

    /// Per-pixel population standard deviation over frames.
    pub fn pool_std(&mut self, v: NodeId) -> NodeId {
        let vv = self.value(v);
        let [m, c, h, w] = vv.shape;
        let out = pool_std(&vv.data, m, c, h * w);
        let rg = self.needs(v);
        self.push(Tensor::from_vec([1, c, h, w], out), Op::PoolStd { v }, rg)
    }

    /// Summed splat weights (coverage), `[1, 1, h, w]`.
    pub fn pool_wsum(&mut self, w: NodeId) -> NodeId {
        let wv = self.value(w);
        let [m, _, h, ww] = wv.shape;
        let out = pool_wsum(&wv.data, m, h * ww);
        let rg = self.needs(w);
        self.push(Tensor::from_vec([1, 1, h, ww], out), Op::PoolWsum { w }, rg)
    }

    /// conv -> ReLU -> conv plus the skip connection.
    pub fn residual_block(
        &mut self,
        x: NodeId,
        w1: NodeId,
        b1: Option<NodeId>,
        w2: NodeId,
        b2: Option<NodeId>,
    ) -> NodeId {
        let y = self.conv2d(x, w1, b1);
        let y = self.relu(y);
        let y = self.conv2d(y, w2, b2);
        self.add(x, y)
    }

    /// Reverse pass from a scalar root; returns per-node gradients.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gy = grads[i].take().expect("present");
            self.backward_op(i, &gy, &mut grads);
            // Leaf gradients are the caller's output; interior grads can be
            // dropped, but keeping the leaf entries costs nothing extra.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_op(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::PadReflect { x, r } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape;
                let mut gx = Tensor::zeros(xv.shape);
                let (oh, ow) = (h + 2 * r, w + 2 * r);
                for in_ in 0..n {
                    for ic in 0..c {
                        for oy in 0..oh {
                            let sy = reflect_index(oy as isize - *r as isize, h);
                            for ox in 0..ow {
                                let sx = reflect_index(ox as isize - *r as isize, w);
                                let o = gx.off(in_, ic, sy, sx);
                                gx.data[o] += gy.at(in_, ic, oy, ox);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::ConvValid { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, conv_valid_grad_input(gy, wv, xv.shape));
                }
                if self.needs(*w) {
                    Self::accumulate(grads, *w, conv_valid_grad_weight(gy, xv, wv.shape));
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let co = wv.shape[0];
                        let mut gb = Tensor::zeros([1, co, 1, 1]);
                        let [n, _, oh, ow] = gy.shape;
                        for in_ in 0..n {
                            for oc in 0..co {
                                let base = gy.off(in_, oc, 0, 0);
                                gb.data[oc] += gy.data[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                        Self::accumulate(grads, *bid, gb);
                    }
                }
            }
            Op::Relu { x } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x);
                let gx = Tensor {
                    shape: xv.shape,
                    data: xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                };
                Self::accumulate(grads, *x, gx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gy.clone());
                }
            }
            Op::ConcatC { xs } => {
                let [n, _, h, w] = gy.shape;
                let plane = h * w;
                let mut c_off = 0;
                for &id in xs {
                    let ci = self.value(id).shape[1];
                    if self.needs(id) {
                        let mut gx = Tensor::zeros(self.value(id).shape);
                        for in_ in 0..n {
                            let src = gy.off(in_, c_off, 0, 0);
                            let dst = gx.off(in_, 0, 0, 0);
                            gx.data[dst..dst + ci * plane]
                                .copy_from_slice(&gy.data[src..src + ci * plane]);
                        }
                        Self::accumulate(grads, id, gx);
                    }
                    c_off += ci;
                }
            }
            Op::BilinearZoom { x, s } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape;
                let mut gx = Tensor::zeros(xv.shape);
                let (oh, ow) = (h * s, w * s);
                for in_ in 0..n {
                    for ic in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, ty) = zoom_taps(oy, *s, h);
                            for ox in 0..ow {
                                let (x0, x1, tx) = zoom_taps(ox, *s, w);
                                let g = gy.at(in_, ic, oy, ox);
                                for (yy, xx, wgt) in [
                                    (y0, x0, (1.0 - ty) * (1.0 - tx)),
                                    (y0, x1, (1.0 - ty) * tx),
                                    (y1, x0, ty * (1.0 - tx)),
                                    (y1, x1, ty * tx),
                                ] {
                                    let o = gx.off(in_, ic, yy, xx);
                                    gx.data[o] += wgt * g;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Subsample { x, factor, phase } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape);
                let [n, c, oh, ow] = gy.shape;
                for in_ in 0..n {
                    for ic in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = gx.off(in_, ic, factor * oy + phase.1, factor * ox + phase.0);
                                gx.data[o] += gy.at(in_, ic, oy, ox);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::L1 { pred, target, border } => {
                if !self.needs(*pred) {
                    return;
                }
                let pv = self.value(*pred);
                let [n, c, h, w] = pv.shape;
                let count = (n * c * (h - 2 * border) * (w - 2 * border)) as f64;
                let scale = gy.scalar_value() / count;
                let mut gx = Tensor::zeros(pv.shape);
                for in_ in 0..n {
                    for ic in 0..c {
                        for y in *border..h - border {
                            for x in *border..w - border {
                                let d = pv.at(in_, ic, y, x) - target.at(in_, ic, y, x);
                                let o = gx.off(in_, ic, y, x);
                                gx.data[o] = scale * sign(d);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *pred, gx);
            }
            Op::Splat { x, fx, fy, s } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x);
                let stack = stack_view(xv);
                let zero_w = vec![0.0; xv.shape[0] * gy.shape[2] * gy.shape[3]];
                let (g_stack, _, _) = spmc_backward_dense(&stack, fx, fy, *s, &gy.data, &zero_w);
                Self::accumulate(grads, *x, Tensor::from_vec(xv.shape, g_stack));
            }
            Op::PoolAvg { v, w } => {
                let vv = self.value(*v);
                let wv = self.value(*w);
                let splat = splat_view(vv, wv);
                let plane = vv.shape[2] * vv.shape[3];
                let wsum = pool_wsum(&wv.data, vv.shape[0], plane);
                let avg = pool_avg(&vv.data, &wsum, vv.shape[0], vv.shape[1], plane);
                let mut g_values = vec![0.0; vv.data.len()];
                let mut g_weights = vec![0.0; wv.data.len()];
                pool_avg_backward(&splat, &wsum, &avg, &gy.data, &mut g_values, &mut g_weights);
                if self.needs(*v) {
                    Self::accumulate(grads, *v, Tensor::from_vec(vv.shape, g_values));
                }
                if self.needs(*w) {
                    Self::accumulate(grads, *w, Tensor::from_vec(wv.shape, g_weights));
                }
            }
            Op::PoolMax { v } => {
                if !self.needs(*v) {
                    return;
                }
                let vv = self.value(*v);
                let splat = values_view(vv);
                let mut g_values = vec![0.0; vv.data.len()];
                pool_max_backward(&splat, &gy.data, &mut g_values);
                Self::accumulate(grads, *v, Tensor::from_vec(vv.shape, g_values));
            }
            Op::PoolStd { v } => {
                if !self.needs(*v) {
                    return;
                }
                let vv = self.value(*v);
                let splat = values_view(vv);
                let mut g_values = vec![0.0; vv.data.len()];
                pool_std_backward(&splat, &gy.data, &mut g_values);
                Self::accumulate(grads, *v, Tensor::from_vec(vv.shape, g_values));
            }
            Op::PoolWsum { w } => {
                if !self.needs(*w) {
                    return;
                }
                let wv = self.value(*w);
                let splat = weights_view(wv);
                let mut g_weights = vec![0.0; wv.data.len()];
                pool_wsum_backward(&splat, &gy.data, &mut g_weights);
                Self::accumulate(grads, *w, Tensor::from_vec(wv.shape, g_weights));
            }
        }
    }
}

fn pool_dims(v: &Tensor, w: &Tensor) -> (usize, usize, usize, (usize, usize)) {
    let [m, c, h, ww] = v.shape;
    assert_eq!(w.shape, [m, 1, h, ww], "pool weights shape mismatch");
    (m, c, h * ww, (h, ww))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Source taps for bilinear zoom output index `o`, origin-aligned (source
/// coordinate o/s): reflected neighbor pair and the interpolation fraction.
#[inline]
fn zoom_taps(o: usize, s: usize, n: usize) -> (usize, usize, f64) {
    let src = o as f64 / s as f64;
    let f = src.floor();
    let t = src - f;
    let i0 = reflect_index(f as isize, n);
    let i1 = reflect_index(f as isize + 1, n);
    (i0, i1, t)
}

fn stack_view(t: &Tensor) -> FeatureStack {
    FeatureStack {
        frames: t.shape[0],
        channels: t.shape[1],
        height: t.shape[2],
        width: t.shape[3],
        values: t.data.clone(),
    }
}

fn splat_view(v: &Tensor, w: &Tensor) -> SplatResult {
    SplatResult {
        frames: v.shape[0],
        channels: v.shape[1],
        height: v.shape[2],
        width: v.shape[3],
        values: v.data.clone(),
        weights: w.data.clone(),
    }
}

fn values_view(v: &Tensor) -> SplatResult {
    SplatResult {
        frames: v.shape[0],
        channels: v.shape[1],
        height: v.shape[2],
        width: v.shape[3],
        values: v.data.clone(),
        weights: Vec::new(),
    }
}

fn weights_view(w: &Tensor) -> SplatResult {
    SplatResult {
        frames: w.shape[0],
        channels: 0,
        height: w.shape[2],
        width: w.shape[3],
        values: Vec::new(),
        weights: w.data.clone(),
    }
}

fn conv_valid_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let [n, ci, h, wd] = x.shape;
    let [co, ci2, kh, kw] = w.shape;
    assert_eq!(ci, ci2, "conv channel mismatch");
    assert!(kh <= h && kw <= wd, "kernel larger than input");
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = Tensor::zeros([n, co, oh, ow]);
    for in_ in 0..n {
        for oc in 0..co {
            let bias = b.map(|t| t.data[oc]).unwrap_or(0.0);
            let out_base = out.off(in_, oc, 0, 0);
            if bias != 0.0 {
                for v in &mut out.data[out_base..out_base + oh * ow] {
                    *v = bias;
                }
            }
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.at(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let src = x.off(in_, ic, y + ky, kx);
                            let dst = out_base + y * ow;
                            let (xs, os) = (&x.data[src..src + ow], &mut out.data[dst..dst + ow]);
                            for i in 0..ow {
                                os[i] += wv * xs[i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_valid_grad_input(gy: &Tensor, w: &Tensor, x_shape: [usize; 4]) -> Tensor {
    let [n, ci, _, _] = x_shape;
    let [co, _, kh, kw] = w.shape;
    let [_, _, oh, ow] = gy.shape;
    let mut gx = Tensor::zeros(x_shape);
    for in_ in 0..n {
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.at(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let src = gy.off(in_, oc, y, 0);
                            let dst = gx.off(in_, ic, y + ky, kx);
                            let (gs, xs) = (&gy.data[src..src + ow], &mut gx.data[dst..dst + ow]);
                            for i in 0..ow {
                                xs[i] += wv * gs[i];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_valid_grad_weight(gy: &Tensor, x: &Tensor, w_shape: [usize; 4]) -> Tensor {
    let [co, ci, kh, kw] = w_shape;
    let [n, _, oh, ow] = gy.shape;
    let mut gw = Tensor::zeros(w_shape);
    for in_ in 0..n {
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let gsrc = gy.off(in_, oc, y, 0);
                            let xsrc = x.off(in_, ic, y + ky, kx);
                            let (gs, xs) = (&gy.data[gsrc..gsrc + ow], &x.data[xsrc..xsrc + ow]);
                            for i in 0..ow {
                                acc += gs[i] * xs[i];
                            }
                        }
                        let o = gw.off(oc, ic, ky, kx);
                        gw.data[o] += acc;
                    }
                }
            }
        }
    }
    gw
}


#[cfg(test)]
mod tests {
    use super::fd::max_rel_error;
    use super::*;
    use crate::rng::{seed_rng, SeedRng};
    use rand::Rng;

    fn rand_t(rng: &mut SeedRng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Mixed-sign residual target with margin away from the L1 kink.
    fn offset_target(rng: &mut SeedRng, from: &Tensor) -> Tensor {
        let data = from
            .data
            .iter()
            .map(|&v| {
                let d: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v + d
                } else {
                    v - d
                }
            })
            .collect();
        Tensor::from_vec(from.shape, data)
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = seed_rng(80);
        let x = rand_t(&mut rng, [1, 1, 6, 6], -1.0, 1.0);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data[4] = 1.0;
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let wid = tape.constant(w);
        let y = tape.conv2d(xid, wid, None);
        assert_eq!(tape.value(y).data, x.data);
    }

    #[test]
    fn relu_routes_gradients_by_sign() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![-2.0, -0.5, 0.5, 2.0]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x, true);
        let y = tape.relu(xid);
        let target = Tensor::from_vec([1, 1, 1, 4], vec![-1.0; 4]);
        let loss = tape.l1_masked(y, target, 0);
        let mut grads = tape.backward(loss);
        let g = grads.take(xid).unwrap();
        // Positive inputs pass d|y - t| / dx = 1/4; negative inputs block.
        assert_eq!(g.data, vec![0.0, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn conv2d_fd_check() {
        let mut rng = seed_rng(81);
        for _ in 0..5 {
            let x = rand_t(&mut rng, [2, 2, 6, 6], -1.0, 1.0);
            let w = rand_t(&mut rng, [3, 2, 3, 3], -0.5, 0.5);
            let b = rand_t(&mut rng, [1, 3, 1, 1], -0.2, 0.2);
            let mut probe = Tape::new();
            let pids = [
                probe.leaf(x.clone(), false),
                probe.leaf(w.clone(), false),
                probe.leaf(b.clone(), false),
            ];
            let out = probe.conv2d(pids[0], pids[1], Some(pids[2]));
            let target = offset_target(&mut rng, probe.value(out));

            let build = move |tape: &mut Tape, ids: &[NodeId]| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]));
                tape.l1_masked(y, target.clone(), 0)
            };
            let err = max_rel_error(&[x, w, b], &build, 1e-5);
            assert!(err < 1e-6, "conv fd rel err {err}");
        }
    }

    #[test]
    fn residual_block_fd_check() {
        let mut rng = seed_rng(82);
        let mut checked = 0;
        let mut seed_extra = 0u64;
        while checked < 3 {
            seed_extra += 1;
            let x = rand_t(&mut rng, [1, 2, 6, 6], -1.0, 1.0);
            let w1 = rand_t(&mut rng, [2, 2, 3, 3], -0.4, 0.4);
            let b1 = rand_t(&mut rng, [1, 2, 1, 1], -0.1, 0.1);
            let w2 = rand_t(&mut rng, [2, 2, 3, 3], -0.4, 0.4);
            let b2 = rand_t(&mut rng, [1, 2, 1, 1], -0.1, 0.1);

            // Reject instances with pre-activations near the ReLU kink.
            let mut probe = Tape::new();
            let ids = [
                probe.leaf(x.clone(), false),
                probe.leaf(w1.clone(), false),
                probe.leaf(b1.clone(), false),
                probe.leaf(w2.clone(), false),
                probe.leaf(b2.clone(), false),
            ];
            let pre = {
                
                probe.conv2d(ids[0], ids[1], Some(ids[2]))
            };
            if super::fd::min_abs_value(&probe, &[pre]) < 1e-3 {
                assert!(seed_extra < 50, "could not find a kink-free instance");
                continue;
            }
            let out = {
                let r = probe.relu(pre);
                let c2 = probe.conv2d(r, ids[3], Some(ids[4]));
                probe.add(ids[0], c2)
            };
            let target = offset_target(&mut rng, probe.value(out));

            let build = move |tape: &mut Tape, ids: &[NodeId]| {
                let y = tape.residual_block(ids[0], ids[1], Some(ids[2]), ids[3], Some(ids[4]));
                tape.l1_masked(y, target.clone(), 0)
            };
            let err = max_rel_error(&[x, w1, b1, w2, b2], &build, 1e-5);
            assert!(err < 1e-5, "resblock fd rel err {err}");
            checked += 1;
        }
    }

    #[test]
    fn zoom_subsample_concat_fd_checks() {
        let mut rng = seed_rng(83);
        let x = rand_t(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        let mut probe = Tape::new();
        let pid = probe.leaf(x.clone(), false);
        let z = probe.bilinear_zoom(pid, 2);
        let target_z = offset_target(&mut rng, probe.value(z));
        let build_zoom = move |tape: &mut Tape, ids: &[NodeId]| {
            let y = tape.bilinear_zoom(ids[0], 2);
            tape.l1_masked(y, target_z.clone(), 0)
        };
        let err = max_rel_error(std::slice::from_ref(&x), &build_zoom, 1e-5);
        assert!(err < 1e-6, "zoom fd rel err {err}");

        for phase in [(0, 0), (1, 1), (1, 0)] {
            let x = rand_t(&mut rng, [1, 1, 6, 6], -1.0, 1.0);
            let mut probe = Tape::new();
            let pid = probe.leaf(x.clone(), false);
            let s = probe.subsample(pid, 2, phase);
            let target = offset_target(&mut rng, probe.value(s));
            let build = move |tape: &mut Tape, ids: &[NodeId]| {
                let y = tape.subsample(ids[0], 2, phase);
                tape.l1_masked(y, target.clone(), 0)
            };
            let err = max_rel_error(&[x], &build, 1e-5);
            assert!(err < 1e-6, "subsample {phase:?} fd rel err {err}");
        }

        let a = rand_t(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        let b = rand_t(&mut rng, [1, 3, 4, 4], -1.0, 1.0);
        let mut probe = Tape::new();
        let ids = [probe.leaf(a.clone(), false), probe.leaf(b.clone(), false)];
        let cat = probe.concat_channels(&ids);
        let target = offset_target(&mut rng, probe.value(cat));
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            let y = tape.concat_channels(ids);
            tape.l1_masked(y, target.clone(), 0)
        };
        let err = max_rel_error(&[a, b], &build, 1e-5);
        assert!(err < 1e-6, "concat fd rel err {err}");
    }

    #[test]
    fn l1_border_exclusion_and_fd() {
        let mut rng = seed_rng(84);
        let x = rand_t(&mut rng, [1, 1, 6, 6], -1.0, 1.0);
        let target = offset_target(&mut rng, &x);

        // Border pixels must not contribute: perturbing one leaves the loss
        // unchanged.
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), true);
        let loss = tape.l1_masked(xid, target.clone(), 2);
        let base = tape.value(loss).scalar_value();
        let mut x_edge = x.clone();
        x_edge.data[0] += 10.0;
        let mut tape2 = Tape::new();
        let xid2 = tape2.leaf(x_edge, false);
        let loss2 = tape2.l1_masked(xid2, target.clone(), 2);
        assert_eq!(base, tape2.value(loss2).scalar_value());

        let build = move |tape: &mut Tape, ids: &[NodeId]| tape.l1_masked(ids[0], target.clone(), 1);
        let err = max_rel_error(&[x], &build, 1e-6);
        assert!(err < 1e-8, "l1 fd rel err {err}");
    }

    #[test]
    fn splat_and_pool_fd_through_tape() {
        let mut rng = seed_rng(85);
        let m = 3;
        let (h, w) = (4usize, 4usize);
        let x = rand_t(&mut rng, [m, 2, h, w], -1.0, 1.0);
        let mut fx = Vec::new();
        let mut fy = Vec::new();
        for _ in 0..m {
            let v: f64 = rng.gen_range(0.08..0.42);
            let s = if rng.gen::<bool>() { v } else { -v };
            fx.extend(std::iter::repeat_n(s, h * w));
            let v: f64 = rng.gen_range(0.08..0.42);
            let s = if rng.gen::<bool>() { v } else { -v };
            fy.extend(std::iter::repeat_n(s, h * w));
        }

        let mut probe = Tape::new();
        let pid = probe.leaf(x.clone(), false);
        let (vals, wts) = probe.splat(pid, fx.clone(), fy.clone(), 2);
        let a = probe.pool_avg(vals, wts);
        let mx = probe.pool_max(vals);
        let sd = probe.pool_std(vals);
        let ws = probe.pool_wsum(wts);
        let cat = probe.concat_channels(&[a, mx, sd, ws]);
        let target = offset_target(&mut rng, probe.value(cat));

        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            let (vals, wts) = tape.splat(ids[0], fx.clone(), fy.clone(), 2);
            let a = tape.pool_avg(vals, wts);
            let mx = tape.pool_max(vals);
            let sd = tape.pool_std(vals);
            let ws = tape.pool_wsum(wts);
            let cat = tape.concat_channels(&[a, mx, sd, ws]);
            tape.l1_masked(cat, target.clone(), 0)
        };
        let err = max_rel_error(&[x], &build, 1e-5);
        assert!(err < 1e-5, "splat+pool fd rel err {err}");
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // x used twice: loss = l1(x + x); gradient must be 2 * d l1.
        let mut rng = seed_rng(86);
        let x = rand_t(&mut rng, [1, 1, 4, 4], 0.5, 1.5);
        let target = Tensor::zeros([1, 1, 4, 4]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x, true);
        let y = tape.add(xid, xid);
        let loss = tape.l1_masked(y, target, 0);
        let mut grads = tape.backward(loss);
        let g = grads.take(xid).unwrap();
        for &v in &g.data {
            assert!((v - 2.0 / 16.0).abs() < 1e-12);
        }
    }
}
