//! Forward observation model and synthetic multi-exposure dataset generation.
//!
//! A clean low-resolution frame normalized to unit exposure, `I`, observed at
//! exposure `e`, is acquired as `e * I + n` with `n ~ N(0, a * e * I + b)`:
//! Poisson shot noise plus Gaussian readout noise in its affine-variance
//! approximation. Sequences are simulated from a high-resolution crop by
//! random subpixel translation followed by x2 subsampling, with exposures on
//! a geometric schedule `e_i = alpha^(c_i)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::LRSequence;
use crate::image::{shift_subpixel, subsample, ImageGrid};
use crate::rng::{normal_pair, SeedRng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("high-resolution dimensions must be even, got {0}x{1}")]
    OddDimensions(usize, usize),
    #[error("frame count must be at least 1")]
    NoFrames,
    #[error("noise parameters must be nonnegative, got a={a}, b={b}")]
    NegativeNoiseParam { a: f64, b: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}

/// Affine variance law: var = a * e * intensity + b.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Shot-noise slope (DN).
    pub a: f64,
    /// Readout variance (DN^2).
    pub b: f64,
}

impl NoiseModel {
    pub fn new(a: f64, b: f64) -> Result<Self, SimError> {
        if a < 0.0 || b < 0.0 {
            return Err(SimError::NegativeNoiseParam { a, b });
        }
        Ok(NoiseModel { a, b })
    }

    /// Zero-noise model, useful for exact oracle runs.
    pub fn noiseless() -> Self {
        NoiseModel { a: 0.0, b: 0.0 }
    }
}

impl Default for NoiseModel {
    /// Constants calibrated on real push-frame acquisitions; used as the
    /// generator default.
    fn default() -> Self {
        NoiseModel { a: 0.119, b: 12.050 }
    }
}

/// Noise variance of a sample acquired at exposure `e` whose clean normalized
/// intensity is `intensity`. Negative intensities (possible in detail-space
/// experiments) are clamped to zero for variance purposes.
pub fn noise_variance(intensity: f64, exposure: f64, model: &NoiseModel) -> f64 {
    model.a * exposure * intensity.max(0.0) + model.b
}

/// Configuration of the synthetic sequence generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of frames per sequence.
    pub frames: usize,
    /// Subpixel translations are drawn uniformly from
    /// [-translation_range, translation_range]^2, in HR pixels.
    pub translation_range: f64,
    /// The exposure base alpha is drawn uniformly from this range, once per
    /// sequence (unless `alpha_override` fixes it for a whole dataset).
    pub alpha_range: (f64, f64),
    /// Exposure exponents c_i are drawn uniformly from this inclusive range.
    pub c_range: (i32, i32),
    /// Reported exposures are the true ones contaminated by a uniform
    /// relative error in [-pct, pct].
    pub exposure_error_pct: f64,
    /// Seed recorded alongside the dataset.
    pub seed: u64,
    /// When set, use this alpha instead of drawing one per sequence.
    pub alpha_override: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frames: 15,
            translation_range: 2.0,
            alpha_range: (1.2, 1.4),
            c_range: (-5, 5),
            exposure_error_pct: 0.0,
            seed: 0,
            alpha_override: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.frames == 0 {
            return Err(SimError::NoFrames);
        }
        if !(self.alpha_range.0 > 1.0 && self.alpha_range.1 >= self.alpha_range.0) {
            return Err(SimError::InvalidConfig("alpha_range must satisfy 1 < lo <= hi"));
        }
        if self.c_range.0 > self.c_range.1 {
            return Err(SimError::InvalidConfig("c_range must be ordered"));
        }
        if self.exposure_error_pct < 0.0 {
            return Err(SimError::InvalidConfig("exposure_error_pct must be nonnegative"));
        }
        if self.translation_range < 0.0 {
            return Err(SimError::InvalidConfig("translation_range must be nonnegative"));
        }
        Ok(())
    }
}

/// Draw the exposure schedule e_i = alpha^(c_i). One alpha per call; the
/// exponents are independent uniform integers over the configured range.
pub fn sample_exposures(cfg: &SimConfig, rng: &mut SeedRng) -> Vec<f64> {
    let alpha = cfg
        .alpha_override
        .unwrap_or_else(|| rng.gen_range(cfg.alpha_range.0..cfg.alpha_range.1));
    sample_exposures_with_alpha(cfg, alpha, rng).1
}

/// Same as [`sample_exposures`] but with the alpha chosen by the caller;
/// returns (alpha, exposures).
pub fn sample_exposures_with_alpha(cfg: &SimConfig, alpha: f64, rng: &mut SeedRng) -> (f64, Vec<f64>) {
    let exposures = (0..cfg.frames)
        .map(|_| {
            let c = rng.gen_range(cfg.c_range.0..=cfg.c_range.1);
            alpha.powi(c)
        })
        .collect();
    (alpha, exposures)
}

/// Contaminate exposures with independent uniform relative errors in
/// [-pct, pct].
pub fn inject_exposure_error(exposures: &[f64], pct: f64, rng: &mut SeedRng) -> Vec<f64> {
    assert!(pct >= 0.0, "pct must be nonnegative");
    exposures
        .iter()
        .map(|&e| {
            let u: f64 = if pct == 0.0 { 0.0 } else { rng.gen_range(-pct..=pct) };
            e * (1.0 + u)
        })
        .collect()
}

/// Everything the generator knows about one simulated sequence. The sequence
/// itself carries the *reported* (contaminated) exposures; the true values
/// and ground-truth motions are kept here for oracle use.
#[derive(Clone, Debug)]
pub struct SimulatedSequence {
    pub sequence: LRSequence,
    /// HR-pixel translation applied to the ground truth for each frame
    /// (zero for the reference).
    pub deltas_hr: Vec<(f64, f64)>,
    /// Ground-truth flows toward the reference in LR pixels; for a frame
    /// shifted by delta this is -delta/2.
    pub flows_lr: Vec<(f64, f64)>,
    /// Uncontaminated exposure times.
    pub exposures_true: Vec<f64>,
    /// Exposure base used for this sequence.
    pub alpha: f64,
    /// Clean normalized LR frames (unit exposure, no noise).
    pub clean: Vec<ImageGrid>,
}

/// Simulate a multi-exposure LR sequence from an even-dimension HR image.
/// Frame 0 is the reference and is subsampled without shift; every other
/// frame is subsampled from a randomly translated copy. Noise is generated
/// with the *true* exposures while the sequence metadata reports the
/// contaminated ones.
pub fn simulate_sequence(
    hr: &ImageGrid,
    cfg: &SimConfig,
    model: &NoiseModel,
    rng: &mut SeedRng,
) -> Result<SimulatedSequence, SimError> {
    cfg.validate()?;
    if !hr.width().is_multiple_of(2) || !hr.height().is_multiple_of(2) {
        return Err(SimError::OddDimensions(hr.width(), hr.height()));
    }

    let (alpha, exposures_true) = {
        let alpha = cfg
            .alpha_override
            .unwrap_or_else(|| rng.gen_range(cfg.alpha_range.0..cfg.alpha_range.1));
        sample_exposures_with_alpha(cfg, alpha, rng)
    };

    let mut deltas_hr = Vec::with_capacity(cfg.frames);
    let mut clean = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let delta = if i == 0 || cfg.translation_range == 0.0 {
            (0.0, 0.0)
        } else {
            (
                rng.gen_range(-cfg.translation_range..=cfg.translation_range),
                rng.gen_range(-cfg.translation_range..=cfg.translation_range),
            )
        };
        deltas_hr.push(delta);
        let shifted;
        let src = if delta == (0.0, 0.0) {
            hr
        } else {
            shifted = shift_subpixel(hr, delta);
            &shifted
        };
        clean.push(subsample(src, 2, (0, 0)).expect("even dims checked"));
    }

    let reported = inject_exposure_error(&exposures_true, cfg.exposure_error_pct, rng);

    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, clean_i) in clean.iter().enumerate() {
        let e = exposures_true[i];
        let noisy = if model.a == 0.0 && model.b == 0.0 {
            clean_i.scaled(e)
        } else {
            let mut out = clean_i.scaled(e);
            for v in out.data_mut() {
                let sigma = noise_variance(*v / e, e, model).sqrt();
                *v += sigma * normal_pair(rng).0;
            }
            out
        };
        frames.push(noisy);
    }

    let sequence = LRSequence::new(frames, reported, 0, Some(*model))
        .expect("simulated frames are consistent by construction");

    let flows_lr = deltas_hr.iter().map(|&(dx, dy)| (-dx / 2.0, -dy / 2.0)).collect();

    Ok(SimulatedSequence {
        sequence,
        deltas_hr,
        flows_lr,
        exposures_true,
        alpha,
        clean,
    })
}

/// Ground-truth sidecar written next to each generated sequence
/// (`truth.json`): the applied HR translations, the implied LR flows toward
/// the reference, the uncontaminated exposures, and where the HR reference
/// crop lives relative to the sequence directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceTruth {
    pub deltas_hr: Vec<(f64, f64)>,
    pub flows_lr: Vec<(f64, f64)>,
    pub exposures_true: Vec<f64>,
    pub alpha: f64,
    pub exposure_error_pct: f64,
    pub hr: String,
}

impl SequenceTruth {
    pub fn from_simulated(sim: &SimulatedSequence, exposure_error_pct: f64, hr: &str) -> Self {
        SequenceTruth {
            deltas_hr: sim.deltas_hr.clone(),
            flows_lr: sim.flows_lr.clone(),
            exposures_true: sim.exposures_true.clone(),
            alpha: sim.alpha,
            exposure_error_pct,
            hr: hr.to_string(),
        }
    }
}

/// Write `truth.json`.
pub fn save_truth(path: &std::path::Path, truth: &SequenceTruth) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(truth).expect("serializable"))
}

/// Read `truth.json`.
pub fn load_truth(path: &std::path::Path) -> std::io::Result<SequenceTruth> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Procedural high-resolution test scene with a natural, decaying spectrum:
/// a smooth background, broad intensity blobs, soft step edges, band-limited
/// noise texture, and oriented gratings whose amplitude falls off with
/// frequency (the super-Nyquist tail still aliases after x2 subsampling,
/// which is what makes super-resolution worthwhile). Values span roughly
/// [10, 3390] DN.
pub fn synthesize_hr(width: usize, height: usize, rng: &mut SeedRng) -> ImageGrid {
    let base: f64 = rng.gen_range(500.0..1400.0);
    let tilt_x: f64 = rng.gen_range(-1.5..1.5);
    let tilt_y: f64 = rng.gen_range(-1.5..1.5);

    struct Blob {
        cx: f64,
        cy: f64,
        amp: f64,
        inv2s2: f64,
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(2..5))
        .map(|_| {
            let s: f64 = rng.gen_range(8.0..30.0);
            Blob {
                cx: rng.gen_range(0.0..width as f64),
                cy: rng.gen_range(0.0..height as f64),
                amp: rng.gen_range(-500.0..800.0),
                inv2s2: 1.0 / (2.0 * s * s),
            }
        })
        .collect();

    struct Grating {
        fx: f64,
        fy: f64,
        amp: f64,
        phase: f64,
    }
    let gratings: Vec<Grating> = (0..rng.gen_range(5..10))
        .map(|_| {
            let f: f64 = rng.gen_range(0.04..0.42);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            // 1/f-style rolloff keeps the aliased tail a minor component, as
            // in real imagery.
            let amp = rng.gen_range(25.0..110.0) * 0.12 / (0.12 + f);
            Grating {
                fx: f * theta.cos() * std::f64::consts::TAU,
                fy: f * theta.sin() * std::f64::consts::TAU,
                amp,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    struct Edge {
        nx: f64,
        ny: f64,
        offset: f64,
        amp: f64,
        softness: f64,
    }
    let edges: Vec<Edge> = (0..rng.gen_range(2..6))
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Edge {
                nx: theta.cos(),
                ny: theta.sin(),
                offset: rng.gen_range(0.2..0.8) * width.min(height) as f64,
                amp: rng.gen_range(-500.0..500.0),
                softness: rng.gen_range(0.7..2.0),
            }
        })
        .collect();

    let mut img = ImageGrid::from_fn(width, height, |x, y| {
        let xf = x as f64;
        let yf = y as f64;
        let mut v = base + tilt_x * xf + tilt_y * yf;
        for b in &blobs {
            let d2 = (xf - b.cx).powi(2) + (yf - b.cy).powi(2);
            v += b.amp * (-d2 * b.inv2s2).exp();
        }
        for g in &gratings {
            v += g.amp * (g.fx * xf + g.fy * yf + g.phase).cos();
        }
        for e in &edges {
            let d = e.nx * xf + e.ny * yf - e.offset;
            v += e.amp * 0.5 * (1.0 + (d / e.softness).tanh());
        }
        v
    });

    // Band-limited texture: white noise smoothed to a ~1.3 px correlation
    // length; dense mid-band energy anchors subpixel registration across the
    // whole frame.
    let noise_rms: f64 = rng.gen_range(20.0..60.0);
    let white = ImageGrid::from_fn(width, height, |_, _| rng.gen_range(-1.0..1.0));
    let smooth = crate::image::convolve(&white, &crate::image::Kernel::gaussian(1.3))
        .expect("kernel fits test scenes");
    let rms = (smooth.data().iter().map(|v| v * v).sum::<f64>() / smooth.data().len() as f64).sqrt();
    let gain = noise_rms / rms.max(1e-12);
    for (v, n) in img.data_mut().iter_mut().zip(smooth.data()) {
        *v = (*v + gain * n).clamp(10.0, 3390.0);
    }
    img
}
