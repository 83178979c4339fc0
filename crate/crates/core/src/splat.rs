//! Forward bilinear splatting onto the upscaled grid, temporal pooling, and
//! their analytic gradients.
//!
//! Each LR sample at `x` with flow `F(x)` lands at HR coordinate
//! `u = s * (x + F(x))` and deposits onto its four bilinear neighbors; a
//! weight map is built the same way from a constant 1. A sample is dropped
//! entirely when any neighbor carrying nonzero weight falls outside the HR
//! grid, so deposited weights always sum to one per kept sample and the
//! splatted mass equals the kept input mass. Pooling reduces the per-frame
//! HR maps with permutation-invariant statistics: the weighted average, the
//! raw per-pixel maximum and the population standard deviation (both over
//! the raw splatted values, zeros included), plus the summed weights the
//! decoder uses to judge coverage.

use thiserror::Error;

use crate::image::ImageGrid;
use crate::register::FlowField;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("expected one flow per frame: {frames} frames, {flows} flows")]
    FlowCount { frames: usize, flows: usize },
    #[error("upscale factor must be at least 1")]
    BadFactor,
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

/// Per-frame multi-channel LR features, layout `[frame][channel][y][x]`.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureStack {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        FeatureStack {
            frames,
            channels,
            height,
            width,
            values: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_values(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, SplatError> {
        if values.len() != frames * channels * height * width {
            return Err(SplatError::Shape("values length does not match dims"));
        }
        Ok(FeatureStack { frames, channels, height, width, values })
    }

    /// One single-channel frame per image.
    pub fn from_images(images: &[ImageGrid]) -> Self {
        let (w, h) = (images[0].width(), images[0].height());
        let mut values = Vec::with_capacity(images.len() * w * h);
        for img in images {
            assert!(img.width() == w && img.height() == h, "frames must share dims");
            values.extend_from_slice(img.data());
        }
        FeatureStack { frames: images.len(), channels: 1, height: h, width: w, values }
    }

    #[inline]
    pub fn idx(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }
}

/// Splatted per-frame HR values and the matching weight maps.
#[derive(Clone, Debug)]
pub struct SplatResult {
    pub frames: usize,
    pub channels: usize,
    /// HR grid height (s * LR height).
    pub height: usize,
    /// HR grid width (s * LR width).
    pub width: usize,
    /// `[frame][channel][y][x]`.
    pub values: Vec<f64>,
    /// `[frame][y][x]`, one channel per frame.
    pub weights: Vec<f64>,
}

impl SplatResult {
    #[inline]
    pub fn vidx(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn widx(&self, f: usize, y: usize, x: usize) -> usize {
        (f * self.height + y) * self.width + x
    }
}

/// Temporally pooled HR features.
#[derive(Clone, Debug)]
pub struct PooledFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Weighted average, 0 where nothing was deposited.
    pub avg: Vec<f64>,
    /// Per-pixel maximum over frames of the raw splatted values.
    pub max: Vec<f64>,
    /// Population standard deviation over frames of the raw splatted values.
    pub std: Vec<f64>,
    /// Summed splat weights (coverage), one channel.
    pub agg_weight: Vec<f64>,
}

/// Gradients flowing back into a [`SplatResult`].
#[derive(Clone, Debug)]
pub struct PooledGrads {
    pub avg: Vec<f64>,
    pub max: Vec<f64>,
    pub std: Vec<f64>,
    pub agg_weight: Vec<f64>,
}

const FOUR_CORNERS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

#[inline]
fn corner_weights(fx: f64, fy: f64) -> [f64; 4] {
    [
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    ]
}

// d(weight)/du and d(weight)/dv for the four corners.
#[inline]
fn corner_weight_grads(fx: f64, fy: f64) -> ([f64; 4], [f64; 4]) {
    (
        [-(1.0 - fy), 1.0 - fy, -fy, fy],
        [-(1.0 - fx), -fx, 1.0 - fx, fx],
    )
}

struct Deposit {
    /// Base output index of the top-left corner for frame-local plane.
    x0: isize,
    y0: isize,
    w: [f64; 4],
    keep: bool,
    fx: f64,
    fy: f64,
}

#[inline]
fn plan_deposit(u: f64, v: f64, out_w: usize, out_h: usize) -> Deposit {
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let w = corner_weights(fx, fy);
    let mut keep = true;
    for (k, &(cx, cy)) in FOUR_CORNERS.iter().enumerate() {
        if w[k] == 0.0 {
            continue;
        }
        let xx = x0 + cx as isize;
        let yy = y0 + cy as isize;
        if xx < 0 || yy < 0 || xx >= out_w as isize || yy >= out_h as isize {
            keep = false;
            break;
        }
    }
    Deposit { x0, y0, w, keep, fx, fy }
}

/// Splat a feature stack onto the x`s` HR grid with one constant flow per
/// frame.
pub fn spmc_splat(stack: &FeatureStack, flows: &[FlowField], s: usize) -> Result<SplatResult, SplatError> {
    if flows.len() != stack.frames {
        return Err(SplatError::FlowCount { frames: stack.frames, flows: flows.len() });
    }
    if s == 0 {
        return Err(SplatError::BadFactor);
    }
    let n = stack.height * stack.width;
    let mut fx = Vec::with_capacity(stack.frames * n);
    let mut fy = Vec::with_capacity(stack.frames * n);
    for f in flows {
        fx.extend(std::iter::repeat_n(f.dx(), n));
        fy.extend(std::iter::repeat_n(f.dy(), n));
    }
    Ok(spmc_splat_dense(stack, &fx, &fy, s))
}

/// Splat with dense per-pixel flows, `[frame][y][x]` for each component.
pub fn spmc_splat_dense(stack: &FeatureStack, flow_x: &[f64], flow_y: &[f64], s: usize) -> SplatResult {
    let n = stack.height * stack.width;
    assert_eq!(flow_x.len(), stack.frames * n, "flow_x length");
    assert_eq!(flow_y.len(), stack.frames * n, "flow_y length");
    let (out_w, out_h) = (stack.width * s, stack.height * s);
    let mut out = SplatResult {
        frames: stack.frames,
        channels: stack.channels,
        height: out_h,
        width: out_w,
        values: vec![0.0; stack.frames * stack.channels * out_h * out_w],
        weights: vec![0.0; stack.frames * out_h * out_w],
    };

    for f in 0..stack.frames {
        for y in 0..stack.height {
            for x in 0..stack.width {
                let p = (f * stack.height + y) * stack.width + x;
                let u = s as f64 * (x as f64 + flow_x[p]);
                let v = s as f64 * (y as f64 + flow_y[p]);
                let d = plan_deposit(u, v, out_w, out_h);
                if !d.keep {
                    continue;
                }
                for (k, &(cx, cy)) in FOUR_CORNERS.iter().enumerate() {
                    if d.w[k] == 0.0 {
                        continue;
                    }
                    let xx = (d.x0 + cx as isize) as usize;
                    let yy = (d.y0 + cy as isize) as usize;
                    let wi = out.widx(f, yy, xx);
                    out.weights[wi] += d.w[k];
                    for c in 0..stack.channels {
                        let vsrc = stack.values[stack.idx(f, c, y, x)];
                        let vi = out.vidx(f, c, yy, xx);
                        out.values[vi] += d.w[k] * vsrc;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`spmc_splat_dense`] with respect to the stack values and the
/// dense flows, given upstream gradients on the splatted values and weights.
/// Dropped samples contribute nothing.
pub fn spmc_backward_dense(
    stack: &FeatureStack,
    flow_x: &[f64],
    flow_y: &[f64],
    s: usize,
    grad_values: &[f64],
    grad_weights: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = stack.height * stack.width;
    let (out_w, out_h) = (stack.width * s, stack.height * s);
    let mut g_stack = vec![0.0; stack.values.len()];
    let mut g_fx = vec![0.0; stack.frames * n];
    let mut g_fy = vec![0.0; stack.frames * n];
    debug_assert_eq!(grad_values.len(), stack.frames * stack.channels * out_h * out_w);
    debug_assert_eq!(grad_weights.len(), stack.frames * out_h * out_w);

    for f in 0..stack.frames {
        for y in 0..stack.height {
            for x in 0..stack.width {
                let p = (f * stack.height + y) * stack.width + x;
                let u = s as f64 * (x as f64 + flow_x[p]);
                let v = s as f64 * (y as f64 + flow_y[p]);
                let d = plan_deposit(u, v, out_w, out_h);
                if !d.keep {
                    continue;
                }
                let (dwdu, dwdv) = corner_weight_grads(d.fx, d.fy);
                let mut du = 0.0;
                let mut dv = 0.0;
                for (k, &(cx, cy)) in FOUR_CORNERS.iter().enumerate() {
                    let xx = d.x0 + cx as isize;
                    let yy = d.y0 + cy as isize;
                    if xx < 0 || yy < 0 || xx >= out_w as isize || yy >= out_h as isize {
                        // Only reachable for a zero-weight corner of a kept
                        // sample; the one-sided derivative is taken as zero.
                        continue;
                    }
                    let (xx, yy) = (xx as usize, yy as usize);
                    let gw = grad_weights[(f * out_h + yy) * out_w + xx];
                    du += dwdu[k] * gw;
                    dv += dwdv[k] * gw;
                    for c in 0..stack.channels {
                        let gi = ((f * stack.channels + c) * out_h + yy) * out_w + xx;
                        let gv = grad_values[gi];
                        let vsrc = stack.values[stack.idx(f, c, y, x)];
                        g_stack[stack.idx(f, c, y, x)] += d.w[k] * gv;
                        du += dwdu[k] * gv * vsrc;
                        dv += dwdv[k] * gv * vsrc;
                    }
                }
                g_fx[p] = s as f64 * du;
                g_fy[p] = s as f64 * dv;
            }
        }
    }
    (g_stack, g_fx, g_fy)
}

/// Forward-only bicubic splatting over a 4x4 footprint (Keys weights). Border
/// corners deposit partially; values and weights stay consistent, which is
/// what the shift-and-add ratio needs. Not used on the feature path.
pub fn splat_bicubic(stack: &FeatureStack, flows: &[FlowField], s: usize) -> Result<SplatResult, SplatError> {
    if flows.len() != stack.frames {
        return Err(SplatError::FlowCount { frames: stack.frames, flows: flows.len() });
    }
    if s == 0 {
        return Err(SplatError::BadFactor);
    }
    let (out_w, out_h) = (stack.width * s, stack.height * s);
    let mut out = SplatResult {
        frames: stack.frames,
        channels: stack.channels,
        height: out_h,
        width: out_w,
        values: vec![0.0; stack.frames * stack.channels * out_h * out_w],
        weights: vec![0.0; stack.frames * out_h * out_w],
    };
    for (f, flow) in flows.iter().enumerate() {
        for y in 0..stack.height {
            for x in 0..stack.width {
                let u = s as f64 * (x as f64 + flow.dx());
                let v = s as f64 * (y as f64 + flow.dy());
                let x0 = u.floor() as isize;
                let y0 = v.floor() as isize;
                let wx = crate::image::cubic_weights(u - u.floor());
                let wy = crate::image::cubic_weights(v - v.floor());
                for (j, wyj) in wy.iter().enumerate() {
                    let yy = y0 - 1 + j as isize;
                    if yy < 0 || yy >= out_h as isize {
                        continue;
                    }
                    for (i, wxi) in wx.iter().enumerate() {
                        let xx = x0 - 1 + i as isize;
                        if xx < 0 || xx >= out_w as isize {
                            continue;
                        }
                        let wk = wxi * wyj;
                        let (xx, yy) = (xx as usize, yy as usize);
                        let wi = out.widx(f, yy, xx);
                        out.weights[wi] += wk;
                        for c in 0..stack.channels {
                            let vi = out.vidx(f, c, yy, xx);
                            out.values[vi] += wk * stack.values[stack.idx(f, c, y, x)];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Permutation-invariant temporal pooling of a splat result.
pub fn pool(splat: &SplatResult) -> PooledFeatures {
    let plane = splat.height * splat.width;
    let nc = splat.channels;
    let m = splat.frames;

    let agg_weight = pool_wsum(&splat.weights, m, plane);
    let avg = pool_avg(&splat.values, &agg_weight, m, nc, plane);
    let max = pool_max(&splat.values, m, nc, plane);
    let std = pool_std(&splat.values, m, nc, plane);

    PooledFeatures {
        channels: nc,
        height: splat.height,
        width: splat.width,
        avg,
        max,
        std,
        agg_weight,
    }
}

pub(crate) fn pool_wsum(weights: &[f64], m: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane];
    for f in 0..m {
        let src = &weights[f * plane..(f + 1) * plane];
        for (o, &w) in out.iter_mut().zip(src) {
            *o += w;
        }
    }
    out
}

pub(crate) fn pool_avg(values: &[f64], wsum: &[f64], m: usize, nc: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; nc * plane];
    for f in 0..m {
        for c in 0..nc {
            let src = &values[(f * nc + c) * plane..(f * nc + c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    for c in 0..nc {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for (o, &w) in dst.iter_mut().zip(wsum) {
            // 0/0 resolves to 0: uncovered pixels carry no consensus.
            if w > 0.0 {
                *o /= w;
            } else {
                *o = 0.0;
            }
        }
    }
    out
}

pub(crate) fn pool_max(values: &[f64], m: usize, nc: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; nc * plane];
    for f in 0..m {
        for c in 0..nc {
            let src = &values[(f * nc + c) * plane..(f * nc + c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    out
}

pub(crate) fn pool_std(values: &[f64], m: usize, nc: usize, plane: usize) -> Vec<f64> {
    let mut sum = vec![0.0; nc * plane];
    let mut sq = vec![0.0; nc * plane];
    for f in 0..m {
        for c in 0..nc {
            let src = &values[(f * nc + c) * plane..(f * nc + c + 1) * plane];
            for (i, &v) in src.iter().enumerate() {
                sum[c * plane + i] += v;
                sq[c * plane + i] += v * v;
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    sum.iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            let mean = s * inv_m;
            (q * inv_m - mean * mean).max(0.0).sqrt()
        })
        .collect()
}

/// Adjoints of the pooling statistics: routes upstream gradients on the
/// pooled features back onto the splatted values and weights. The max routes
/// to the first maximizing frame; the standard deviation's gradient is zero
/// where the deviation itself is zero.
pub fn pool_backward(splat: &SplatResult, grads: &PooledGrads) -> (Vec<f64>, Vec<f64>) {
    let plane = splat.height * splat.width;
    let nc = splat.channels;
    let m = splat.frames;

    let wsum = pool_wsum(&splat.weights, m, plane);
    let avg = pool_avg(&splat.values, &wsum, m, nc, plane);

    let mut g_values = vec![0.0; splat.values.len()];
    let mut g_weights = vec![0.0; splat.weights.len()];

    pool_avg_backward(splat, &wsum, &avg, &grads.avg, &mut g_values, &mut g_weights);
    pool_max_backward(splat, &grads.max, &mut g_values);
    pool_std_backward(splat, &grads.std, &mut g_values);
    pool_wsum_backward(splat, &grads.agg_weight, &mut g_weights);

    (g_values, g_weights)
}

pub(crate) fn pool_avg_backward(
    splat: &SplatResult,
    wsum: &[f64],
    avg: &[f64],
    g_avg: &[f64],
    g_values: &mut [f64],
    g_weights: &mut [f64],
) {
    let plane = splat.height * splat.width;
    let nc = splat.channels;
    for p in 0..plane {
        let w = wsum[p];
        if w <= 0.0 {
            continue;
        }
        let inv_w = 1.0 / w;
        // d avg / d weight is shared by every frame: -avg / wsum per channel.
        let mut wgrad = 0.0;
        for c in 0..nc {
            wgrad -= g_avg[c * plane + p] * avg[c * plane + p] * inv_w;
        }
        for f in 0..splat.frames {
            for c in 0..nc {
                g_values[(f * nc + c) * plane + p] += g_avg[c * plane + p] * inv_w;
            }
            g_weights[f * plane + p] += wgrad;
        }
    }
}

pub(crate) fn pool_max_backward(splat: &SplatResult, g_max: &[f64], g_values: &mut [f64]) {
    let plane = splat.height * splat.width;
    let nc = splat.channels;
    for c in 0..nc {
        for p in 0..plane {
            let mut best_f = 0usize;
            let mut best = f64::NEG_INFINITY;
            for f in 0..splat.frames {
                let v = splat.values[(f * nc + c) * plane + p];
                if v > best {
                    best = v;
                    best_f = f;
                }
            }
            g_values[(best_f * nc + c) * plane + p] += g_max[c * plane + p];
        }
    }
}

pub(crate) fn pool_std_backward(splat: &SplatResult, g_std: &[f64], g_values: &mut [f64]) {
    let plane = splat.height * splat.width;
    let nc = splat.channels;
    let m = splat.frames;
    let inv_m = 1.0 / m as f64;
    for c in 0..nc {
        for p in 0..plane {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for f in 0..m {
                let v = splat.values[(f * nc + c) * plane + p];
                sum += v;
                sq += v * v;
            }
            let mean = sum * inv_m;
            let std = (sq * inv_m - mean * mean).max(0.0).sqrt();
            if std <= 0.0 {
                continue;
            }
            let g = g_std[c * plane + p] / (m as f64 * std);
            for f in 0..m {
                let v = splat.values[(f * nc + c) * plane + p];
                g_values[(f * nc + c) * plane + p] += g * (v - mean);
            }
        }
    }
}

pub(crate) fn pool_wsum_backward(splat: &SplatResult, g_agg: &[f64], g_weights: &mut [f64]) {
    let plane = splat.height * splat.width;
    for f in 0..splat.frames {
        for p in 0..plane {
            g_weights[f * plane + p] += g_agg[p];
        }
    }
}
