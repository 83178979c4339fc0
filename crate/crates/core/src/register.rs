//! Subpixel translation estimation, warping, the detail-domain motion loss,
//! and exposure-ratio estimation.
//!
//! Motion is modeled as a global translation per frame: push-frame sequences
//! are near-translational at crop scale. Estimation is two-stage: FFT phase
//! correlation for the integer part, then inverse-compositional Gauss-Newton
//! refinement on Gaussian-prefiltered detail channels, which makes the
//! estimate insensitive to brightness differences between exposures. The
//! [`FlowField`] keeps the constant-translation representation but expands to
//! a dense field, so downstream interfaces accept a dense estimator later.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::base_detail::{decompose, DETAIL_SIGMA};
use crate::image::{convolve, ImageGrid, Kernel};

/// Maximum motion range handled by estimation, in LR pixels.
pub const MAX_TRANSLATION: f64 = 5.0;

/// Default saturation threshold for exposure-ratio masking: the 12-bit range
/// minus a 2% margin.
pub const DEFAULT_SATURATION: f64 = 0.98 * 4095.0;

const IC_MAX_ITER: usize = 30;
const IC_TOL: f64 = 1e-4;
const IC_MARGIN: usize = 8;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("images are {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("images must be at least 32x32 for estimation, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("no texture: detail energy is zero")]
    NoTexture,
    #[error("flow components must be finite, got ({0}, {1})")]
    NonFiniteFlow(f64, f64),
    #[error("all pixels masked in ratio estimation")]
    AllPixelsMasked,
    #[error("flows ({flows}) not aligned with frames ({frames})")]
    FlowCount { flows: usize, frames: usize },
    #[error("reference index {0} out of range")]
    BadReference(usize),
}

/// Constant-translation flow toward the reference, in LR pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowField {
    dx: f64,
    dy: f64,
}

impl FlowField {
    pub fn translation(dx: f64, dy: f64) -> Result<Self, RegisterError> {
        if !dx.is_finite() || !dy.is_finite() {
            return Err(RegisterError::NonFiniteFlow(dx, dy));
        }
        Ok(FlowField { dx, dy })
    }

    pub const fn zero() -> Self {
        FlowField { dx: 0.0, dy: 0.0 }
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }

    pub fn negated(&self) -> FlowField {
        FlowField { dx: -self.dx, dy: -self.dy }
    }

    /// Componentwise difference; re-expresses a flow toward frame `other`'s
    /// target as a flow toward a new reference.
    pub fn minus(&self, other: &FlowField) -> FlowField {
        FlowField { dx: self.dx - other.dx, dy: self.dy - other.dy }
    }

    /// Flow with a constant offset added, e.g. grid-shift augmentation.
    pub fn offset(&self, ox: f64, oy: f64) -> FlowField {
        FlowField { dx: self.dx + ox, dy: self.dy + oy }
    }

    pub fn clamped(&self, range: f64) -> FlowField {
        FlowField {
            dx: self.dx.clamp(-range, range),
            dy: self.dy.clamp(-range, range),
        }
    }

    /// Largest absolute component.
    pub fn magnitude(&self) -> f64 {
        self.dx.abs().max(self.dy.abs())
    }

    /// Dense H x W x 2 expansion.
    pub fn dense(&self, width: usize, height: usize) -> DenseFlow {
        DenseFlow {
            width,
            height,
            x: vec![self.dx; width * height],
            y: vec![self.dy; width * height],
        }
    }
}

/// Per-pixel displacement field.
#[derive(Clone, Debug)]
pub struct DenseFlow {
    pub width: usize,
    pub height: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Anisotropic total variation of a dense flow, forward differences on both
/// components. Identically zero for constant translations.
pub fn total_variation(flow: &DenseFlow) -> f64 {
    let (w, h) = (flow.width, flow.height);
    let mut tv = 0.0;
    for comp in [&flow.x, &flow.y] {
        for y in 0..h {
            for x in 0..w {
                let v = comp[y * w + x];
                if x + 1 < w {
                    tv += (comp[y * w + x + 1] - v).abs();
                }
                if y + 1 < h {
                    tv += (comp[(y + 1) * w + x] - v).abs();
                }
            }
        }
    }
    tv
}

/// Bicubic warp of `img` by a flow: `out(x) = img(x + F(x))`, reflected
/// borders.
pub fn pullback(img: &ImageGrid, flow: &FlowField) -> ImageGrid {
    if flow.is_zero() {
        return img.clone();
    }
    ImageGrid::from_fn(img.width(), img.height(), |x, y| {
        img.sample_bicubic(x as f64 + flow.dx, y as f64 + flow.dy)
    })
}

/// [`pullback`] with a per-pixel flow.
pub fn pullback_dense(img: &ImageGrid, flow: &DenseFlow) -> ImageGrid {
    assert_eq!(img.width(), flow.width);
    assert_eq!(img.height(), flow.height);
    ImageGrid::from_fn(img.width(), img.height(), |x, y| {
        let i = y * flow.width + x;
        img.sample_bicubic(x as f64 + flow.x[i], y as f64 + flow.y[i])
    })
}

/// High-pass used throughout: the detail band of the sigma-1 decomposition.
pub fn detail_highpass(img: &ImageGrid) -> ImageGrid {
    decompose(img, DETAIL_SIGMA).detail
}

/// Integer displacement (dx, dy) such that `moving(x) ~ reference(x + d)`,
/// found as the peak of the normalized cross-power spectrum. Exact for
/// circular integer shifts.
pub fn phase_correlation(reference: &ImageGrid, moving: &ImageGrid) -> Result<(isize, isize), RegisterError> {
    if !reference.same_dims(moving) {
        return Err(RegisterError::DimensionMismatch(
            reference.width(),
            reference.height(),
            moving.width(),
            moving.height(),
        ));
    }
    let (w, h) = (reference.width(), reference.height());

    let mut fr: Vec<Complex<f64>> = reference.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut fm: Vec<Complex<f64>> = moving.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut fr, w, h, false);
    fft2(&mut fm, w, h, false);

    let mut cross: Vec<Complex<f64>> = fr
        .iter()
        .zip(&fm)
        .map(|(r, m)| {
            let c = r * m.conj();
            let mag = c.norm();
            if mag > 1e-12 {
                c / mag
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut cross, w, h, true);

    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, c) in cross.iter().enumerate() {
        if c.re > best_v {
            best_v = c.re;
            best = i;
        }
    }
    let px = (best % w) as isize;
    let py = (best / w) as isize;
    let dx = if px <= w as isize / 2 { px } else { px - w as isize };
    let dy = if py <= h as isize / 2 { py } else { py - h as isize };
    Ok((dx, dy))
}

/// In-place 2-D FFT: rows then columns.
fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Gaussian-prefiltered detail channel scaled to unit RMS; the shared input
/// representation of both estimation stages.
fn normalized_detail(img: &ImageGrid) -> Result<ImageGrid, RegisterError> {
    let smoothed = convolve(img, &Kernel::gaussian(1.0)).map_err(|_| {
        RegisterError::TooSmall(img.width(), img.height())
    })?;
    let detail = detail_highpass(&smoothed);
    let n = detail.data().len() as f64;
    let rms = (detail.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let scale = img.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if rms <= 1e-9 * (1.0 + scale) {
        return Err(RegisterError::NoTexture);
    }
    Ok(detail.scaled(1.0 / rms))
}

/// Estimate the translation mapping `moving` onto `reference`:
/// `moving(x) ~ reference(x + flow)`. Phase correlation provides the integer
/// part, inverse-compositional Gauss-Newton on normalized detail channels the
/// subpixel part; the result is clamped to [`MAX_TRANSLATION`].
pub fn estimate_translation(reference: &ImageGrid, moving: &ImageGrid) -> Result<FlowField, RegisterError> {
    if !reference.same_dims(moving) {
        return Err(RegisterError::DimensionMismatch(
            reference.width(),
            reference.height(),
            moving.width(),
            moving.height(),
        ));
    }
    if reference.width() < 32 || reference.height() < 32 {
        return Err(RegisterError::TooSmall(reference.width(), reference.height()));
    }

    let det_ref = normalized_detail(reference)?;
    let det_mov = normalized_detail(moving)?;

    let (ix, iy) = phase_correlation(&det_ref, &det_mov)?;
    let d0 = (
        (ix as f64).clamp(-MAX_TRANSLATION, MAX_TRANSLATION),
        (iy as f64).clamp(-MAX_TRANSLATION, MAX_TRANSLATION),
    );

    let (dx, dy) = ic_refine(&det_ref, &det_mov, d0)?;
    Ok(FlowField::translation(dx, dy)?.clamped(MAX_TRANSLATION))
}

/// Inverse-compositional refinement. The template is the moving detail image:
/// its gradients and the 2x2 Hessian are computed once, each iteration warps
/// the reference and solves for the additive update.
fn ic_refine(det_ref: &ImageGrid, det_mov: &ImageGrid, d0: (f64, f64)) -> Result<(f64, f64), RegisterError> {
    let (w, h) = (det_mov.width(), det_mov.height());
    let m = IC_MARGIN;

    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut h00 = 0.0;
    let mut h01 = 0.0;
    let mut h11 = 0.0;
    for y in m..h - m {
        for x in m..w - m {
            let i = y * w + x;
            let dx = 0.5 * (det_mov.get(x + 1, y) - det_mov.get(x - 1, y));
            let dy = 0.5 * (det_mov.get(x, y + 1) - det_mov.get(x, y - 1));
            gx[i] = dx;
            gy[i] = dy;
            h00 += dx * dx;
            h01 += dx * dy;
            h11 += dy * dy;
        }
    }
    let det = h00 * h11 - h01 * h01;
    let trace = h00 + h11;
    if trace <= 1e-12 || det <= 1e-12 * trace * trace {
        return Err(RegisterError::NoTexture);
    }
    let inv00 = h11 / det;
    let inv01 = -h01 / det;
    let inv11 = h00 / det;

    let (mut dx, mut dy) = d0;
    for _ in 0..IC_MAX_ITER {
        let mut b0 = 0.0;
        let mut b1 = 0.0;
        for y in m..h - m {
            for x in m..w - m {
                let i = y * w + x;
                let r = det_ref.sample_bicubic(x as f64 + dx, y as f64 + dy) - det_mov.get(x, y);
                b0 += gx[i] * r;
                b1 += gy[i] * r;
            }
        }
        let ux = inv00 * b0 + inv01 * b1;
        let uy = inv01 * b0 + inv11 * b1;
        dx -= ux;
        dy -= uy;
        if ux.abs().max(uy.abs()) < IC_TOL {
            break;
        }
        // Keep the iterate inside the trusted range so the warp margin holds.
        dx = dx.clamp(-MAX_TRANSLATION - 1.0, MAX_TRANSLATION + 1.0);
        dy = dy.clamp(-MAX_TRANSLATION - 1.0, MAX_TRANSLATION + 1.0);
    }
    Ok((dx, dy))
}

/// Detail-domain warping loss plus total-variation regularization of the
/// flows. The data term sums absolute detail residuals over pixels at least
/// two away from the border.
pub fn warping_loss(
    frames: &[ImageGrid],
    flows: &[FlowField],
    reference_index: usize,
    lambda1: f64,
) -> Result<f64, RegisterError> {
    if flows.len() != frames.len() {
        return Err(RegisterError::FlowCount { flows: flows.len(), frames: frames.len() });
    }
    if reference_index >= frames.len() {
        return Err(RegisterError::BadReference(reference_index));
    }
    let reference = &frames[reference_index];
    let (w, h) = (reference.width(), reference.height());
    let border = border_guard(w, h);

    let mut total = 0.0;
    for (frame, flow) in frames.iter().zip(flows) {
        if !frame.same_dims(reference) {
            return Err(RegisterError::DimensionMismatch(frame.width(), frame.height(), w, h));
        }
        let warped = pullback(reference, flow);
        let diff = frame.zip(&warped, |a, b| a - b).expect("same dims");
        let det = detail_highpass(&diff);
        for y in border..h - border {
            for x in border..w - border {
                total += det.get(x, y).abs();
            }
        }
        if lambda1 != 0.0 {
            total += lambda1 * total_variation(&flow.dense(w, h));
        }
    }
    Ok(total)
}

// Border of 2, but never beyond the image.
fn border_guard(w: usize, h: usize) -> usize {
    2usize.min(w / 2).min(h / 2)
}

/// Outcome of exposure-ratio estimation between two frames.
#[derive(Clone, Copy, Debug)]
pub struct ExposureRatioEstimate {
    /// Spatial median of the aligned intensity ratio.
    pub ratio: f64,
    /// Number of pixels that survived masking.
    pub n_valid: usize,
    pub saturation_threshold: f64,
}

/// Estimate the exposure ratio between `a` and `b` (roughly e_b / e_a):
/// register `b` onto `a`, drop saturated pixels and near-zero denominators,
/// and take the spatial median of the pointwise ratio.
pub fn estimate_exposure_ratio(
    a: &ImageGrid,
    b: &ImageGrid,
    saturation_threshold: f64,
) -> Result<ExposureRatioEstimate, RegisterError> {
    if !a.same_dims(b) {
        return Err(RegisterError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let flow = estimate_translation(a, b)?;
    let aligned = if flow.is_zero() { b.clone() } else { pullback(b, &flow.negated()) };

    let eps_div = 1e-3 * saturation_threshold;
    let margin = flow.magnitude().ceil() as usize + 2;
    let (w, h) = (a.width(), a.height());
    if 2 * margin >= w || 2 * margin >= h {
        return Err(RegisterError::AllPixelsMasked);
    }

    let mut ratios = Vec::with_capacity((w - 2 * margin) * (h - 2 * margin));
    for y in margin..h - margin {
        for x in margin..w - margin {
            let va = a.get(x, y);
            let vb = aligned.get(x, y);
            if va >= saturation_threshold || vb >= saturation_threshold || va.abs() < eps_div {
                continue;
            }
            ratios.push(vb / va);
        }
    }
    if ratios.is_empty() {
        return Err(RegisterError::AllPixelsMasked);
    }
    ratios.sort_by(|p, q| p.partial_cmp(q).expect("finite ratios"));
    let n = ratios.len();
    let ratio = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    Ok(ExposureRatioEstimate { ratio, n_valid: n, saturation_threshold })
}
