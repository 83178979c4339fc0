//! Single-channel rasters and the resampling and metric primitives shared by
//! every stage of the pipeline.
//!
//! Values are digital numbers (DN) held as `f64`. All boundary handling uses
//! mirror-without-repeat reflection: index -1 maps to 1, index `n` maps to
//! `n - 2`. Subpixel resampling is bicubic with the Keys kernel (a = -0.5),
//! which is node-exact, so integer shifts reproduce the input away from the
//! borders.

use thiserror::Error;

/// Sentinel returned by [`psnr`] when the MSE is exactly zero. Kept finite so
/// report files stay plain numeric columns.
pub const PSNR_INFINITE_DB: f64 = 999.0;

/// Default PSNR peak; the sensor data is nominally 12 bit but its usable peak
/// sits near 3400 DN. Data is never clamped to this value.
pub const DEFAULT_PSNR_PEAK: f64 = 3400.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("data length {len} does not match {width}x{height}")]
    DataLength { width: usize, height: usize, len: usize },
    #[error("image dimensions must be at least 1x1")]
    EmptyImage,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("kernel radius {radius} too large for {width}x{height} image")]
    KernelTooLarge { radius: usize, width: usize, height: usize },
    #[error("subsample phase {phase:?} out of range for factor {factor}")]
    PhaseOutOfRange { factor: usize, phase: (usize, usize) },
    #[error("kernel taps length {len} does not match radius {radius}")]
    KernelTaps { radius: usize, len: usize },
    #[error("peak must be positive, got {0}")]
    NonPositivePeak(f64),
}

/// Row-major single-channel raster of real intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(ImageError::DataLength { width, height, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixelwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixelwise combination of two images of equal dimensions.
    pub fn zip(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid, ImageError> {
        if !self.same_dims(other) {
            return Err(ImageError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(ImageGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scaled(&self, k: f64) -> ImageGrid {
        self.map(|v| v * k)
    }

    /// Crop of size `w` x `h` with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageGrid {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        ImageGrid { width: w, height: h, data }
    }

    /// Value at integer coordinates with mirror-without-repeat extension.
    #[inline]
    pub fn sample_reflect(&self, x: isize, y: isize) -> f64 {
        let xi = reflect_index(x, self.width);
        let yi = reflect_index(y, self.height);
        self.data[yi * self.width + xi]
    }

    /// Bilinear sample at real coordinates, reflected borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let tx = x - x0;
        let ty = y - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let v00 = self.sample_reflect(x0, y0);
        let v10 = self.sample_reflect(x0 + 1, y0);
        let v01 = self.sample_reflect(x0, y0 + 1);
        let v11 = self.sample_reflect(x0 + 1, y0 + 1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }

    /// Bicubic sample (Keys a = -0.5) at real coordinates, reflected borders.
    pub fn sample_bicubic(&self, x: f64, y: f64) -> f64 {
        let x0f = x.floor();
        let y0f = y.floor();
        let tx = x - x0f;
        let ty = y - y0f;
        let x0 = x0f as isize;
        let y0 = y0f as isize;
        let wx = cubic_weights(tx);
        let wy = cubic_weights(ty);
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let yy = y0 - 1 + j as isize;
            let mut row = 0.0;
            for (i, wxi) in wx.iter().enumerate() {
                row += wxi * self.sample_reflect(x0 - 1 + i as isize, yy);
            }
            acc += wyj * row;
        }
        acc
    }
}

/// Mirror-without-repeat index: ..., 2, 1, 0, 1, 2, ..., n-1, n-2, ...
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Keys cubic interpolation weights (a = -0.5) for the four nodes around a
/// sample at fractional offset `t` in [0, 1).
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Square convolution kernel; Gaussians keep a separable representation.
#[derive(Clone, Debug)]
pub struct Kernel {
    radius: usize,
    taps: Taps,
}

#[derive(Clone, Debug)]
enum Taps {
    /// Row-major (2r+1)^2 taps.
    Full(Vec<f64>),
    /// 1-D taps of length 2r+1; the 2-D kernel is their outer product.
    Separable(Vec<f64>),
}

impl Kernel {
    /// Radius-0 identity.
    pub fn identity() -> Self {
        Kernel { radius: 0, taps: Taps::Full(vec![1.0]) }
    }

    /// Normalized Gaussian truncated at radius ceil(4 sigma); the truncated
    /// mass is below 1e-4 and renormalization restores a unit sum.
    pub fn gaussian(sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        let radius = (4.0 * sigma).ceil() as usize;
        let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        Kernel { radius, taps: Taps::Separable(taps) }
    }

    /// Arbitrary kernel from row-major taps of length (2 radius + 1)^2.
    pub fn from_taps(radius: usize, taps: Vec<f64>) -> Result<Self, ImageError> {
        let side = 2 * radius + 1;
        if taps.len() != side * side {
            return Err(ImageError::KernelTaps { radius, len: taps.len() });
        }
        Ok(Kernel { radius, taps: Taps::Full(taps) })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Tap at offset `(dx, dy)` from the center.
    pub fn tap(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        debug_assert!(dx.abs() <= r && dy.abs() <= r);
        match &self.taps {
            Taps::Full(t) => {
                let side = 2 * self.radius + 1;
                t[(dy + r) as usize * side + (dx + r) as usize]
            }
            Taps::Separable(t) => t[(dx + r) as usize] * t[(dy + r) as usize],
        }
    }

    /// Sum of all taps (1 for smoothing kernels).
    pub fn sum(&self) -> f64 {
        match &self.taps {
            Taps::Full(t) => t.iter().sum(),
            Taps::Separable(t) => {
                let s: f64 = t.iter().sum();
                s * s
            }
        }
    }

    /// Sum of squared taps, used by the base noise model.
    pub fn sum_sq(&self) -> f64 {
        match &self.taps {
            Taps::Full(t) => t.iter().map(|v| v * v).sum(),
            Taps::Separable(t) => {
                let s: f64 = t.iter().map(|v| v * v).sum();
                s * s
            }
        }
    }

    /// Row-major expansion of the full (2r+1)^2 tap grid.
    pub fn full_taps(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        let mut out = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                out.push(self.tap(dx, dy));
            }
        }
        out
    }

    /// True when the kernel equals its 180-degree rotation.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let r = self.radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if (self.tap(dx, dy) - self.tap(-dx, -dy)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Correlate `img` with `kernel` under reflected borders. For the symmetric
/// kernels used in this crate this coincides with convolution. Output has the
/// same dimensions as the input.
pub fn convolve(img: &ImageGrid, kernel: &Kernel) -> Result<ImageGrid, ImageError> {
    let (w, h) = (img.width(), img.height());
    if kernel.radius() >= w.min(h) {
        return Err(ImageError::KernelTooLarge { radius: kernel.radius(), width: w, height: h });
    }
    if kernel.radius() == 0 {
        return Ok(img.scaled(kernel.sum()));
    }
    let r = kernel.radius() as isize;
    match &kernel.taps {
        Taps::Separable(t) => {
            // Horizontal pass, then vertical.
            let mut tmp = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, tk) in t.iter().enumerate() {
                        let xi = reflect_index(x as isize + k as isize - r, w);
                        acc += tk * img.data()[y * w + xi];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for (k, tk) in t.iter().enumerate() {
                    let yi = reflect_index(y as isize + k as isize - r, h);
                    let src = &tmp[yi * w..yi * w + w];
                    let dst = &mut out[y * w..y * w + w];
                    for x in 0..w {
                        dst[x] += tk * src[x];
                    }
                }
            }
            ImageGrid::new(w, h, out)
        }
        Taps::Full(_) => {
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let yi = reflect_index(y as isize + dy, h);
                        for dx in -r..=r {
                            let xi = reflect_index(x as isize + dx, w);
                            acc += kernel.tap(dx, dy) * img.data()[yi * w + xi];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            ImageGrid::new(w, h, out)
        }
    }
}

/// Keep one pixel every `factor` in each direction, starting at `phase`.
/// Output dimensions are the floor division of the input dimensions, so they
/// do not depend on the phase.
pub fn subsample(img: &ImageGrid, factor: usize, phase: (usize, usize)) -> Result<ImageGrid, ImageError> {
    assert!(factor >= 1, "factor must be at least 1");
    if phase.0 >= factor || phase.1 >= factor {
        return Err(ImageError::PhaseOutOfRange { factor, phase });
    }
    let ow = img.width() / factor;
    let oh = img.height() / factor;
    if ow == 0 || oh == 0 {
        return Err(ImageError::EmptyImage);
    }
    let mut data = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let sy = factor * y + phase.1;
        for x in 0..ow {
            data.push(img.get(factor * x + phase.0, sy));
        }
    }
    ImageGrid::new(ow, oh, data)
}

/// Translate image content by `delta` pixels via bicubic resampling:
/// `out(x, y) = img(x - dx, y - dy)` with reflected borders.
pub fn shift_subpixel(img: &ImageGrid, delta: (f64, f64)) -> ImageGrid {
    let (dx, dy) = delta;
    ImageGrid::from_fn(img.width(), img.height(), |x, y| {
        img.sample_bicubic(x as f64 - dx, y as f64 - dy)
    })
}

/// Bilinear upscaling by integer factor `s`, origin-aligned: output pixel
/// (u, v) samples the source at (u/s, v/s), so source pixel x lands exactly
/// on output pixel s*x. This is the same coordinate map the splatting uses,
/// which keeps the upscaled base registered with the splatted detail.
pub fn zoom_bilinear(img: &ImageGrid, s: usize) -> ImageGrid {
    assert!(s >= 1);
    if s == 1 {
        return img.clone();
    }
    let ow = img.width() * s;
    let oh = img.height() * s;
    ImageGrid::from_fn(ow, oh, |u, v| {
        img.sample_bilinear(u as f64 / s as f64, v as f64 / s as f64)
    })
}

/// Mean squared error between two images of equal dimensions.
pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64, ImageError> {
    if !a.same_dims(b) {
        return Err(ImageError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let n = a.data().len() as f64;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in decibels: 10 log10(peak^2 / MSE). Returns
/// [`PSNR_INFINITE_DB`] when the MSE is zero.
pub fn psnr(est: &ImageGrid, reference: &ImageGrid, peak: f64) -> Result<f64, ImageError> {
    if peak <= 0.0 {
        return Err(ImageError::NonPositivePeak(peak));
    }
    let m = mse(est, reference)?;
    if m == 0.0 {
        return Ok(PSNR_INFINITE_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}
