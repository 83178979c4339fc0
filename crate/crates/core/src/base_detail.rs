//! Base-detail decomposition and robust high-resolution base fusion.
//!
//! The base is the Gaussian-smoothed image; the detail is the residual that
//! carries the aliasing needed for super-resolution. Exposure errors scale
//! both bands, but since the detail spans a much smaller range than the base,
//! the damage concentrates in the base, which is fused by an exposure-time
//! weighted average that approximates the maximum-likelihood estimate in the
//! high-SNR regime. The full iterative MLE is also provided.

use thiserror::Error;

use crate::image::{convolve, zoom_bilinear, ImageGrid, Kernel};
use crate::noise::NoiseModel;
use crate::register::{pullback, FlowField};

/// Standard deviation of the decomposition Gaussian.
pub const DETAIL_SIGMA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("no frames to fuse")]
    Empty,
    #[error("lists are not aligned: {bases} bases, {exposures} exposures, {flows} flows")]
    Misaligned {
        bases: usize,
        exposures: usize,
        flows: usize,
    },
    #[error("dimension mismatch between frames")]
    DimensionMismatch,
}

/// An image split into a low-frequency base and an aliasing-carrying detail.
#[derive(Clone, Debug)]
pub struct BaseDetailPair {
    pub base: ImageGrid,
    pub detail: ImageGrid,
}

/// Split `img` into base (Gaussian of standard deviation `sigma`) and detail
/// (the residual). `recompose` inverts this exactly up to rounding.
pub fn decompose(img: &ImageGrid, sigma: f64) -> BaseDetailPair {
    let base = convolve(img, &Kernel::gaussian(sigma)).expect("decomposition kernel fits");
    let detail = img.zip(&base, |i, b| i - b).expect("same dims");
    BaseDetailPair { base, detail }
}

/// Sum base and detail back into an image.
pub fn recompose(pair: &BaseDetailPair) -> Result<ImageGrid, FuseError> {
    pair.base
        .zip(&pair.detail, |b, d| b + d)
        .map_err(|_| FuseError::DimensionMismatch)
}

/// How the aligned base samples are averaged.
#[derive(Clone, Copy, Debug)]
pub enum BaseFusionWeights {
    /// Weights proportional to the exposure times (the high-SNR limit of the
    /// MLE weights); the deployed default.
    Exposure,
    /// Per-pixel iterative MLE with base-domain noise parameters
    /// (alpha, beta), see [`granados_mle`].
    Mle { alpha: f64, beta: f64 },
}

/// Fuse per-frame bases into a x`s` high-resolution base: warp each base to
/// the reference with bicubic pullback, average, then upscale bilinearly.
pub fn fuse_bases(
    bases: &[ImageGrid],
    exposures: &[f64],
    flows: &[FlowField],
    s: usize,
) -> Result<ImageGrid, FuseError> {
    fuse_bases_with(bases, exposures, flows, s, BaseFusionWeights::Exposure)
}

pub fn fuse_bases_with(
    bases: &[ImageGrid],
    exposures: &[f64],
    flows: &[FlowField],
    s: usize,
    weights: BaseFusionWeights,
) -> Result<ImageGrid, FuseError> {
    if bases.is_empty() {
        return Err(FuseError::Empty);
    }
    if bases.len() != exposures.len() || bases.len() != flows.len() {
        return Err(FuseError::Misaligned {
            bases: bases.len(),
            exposures: exposures.len(),
            flows: flows.len(),
        });
    }
    let (w, h) = (bases[0].width(), bases[0].height());
    if bases.iter().any(|b| b.width() != w || b.height() != h) {
        return Err(FuseError::DimensionMismatch);
    }

    // Align frame i onto the reference grid: its flow points toward the
    // reference, so sampling at x - flow brings the content back.
    let aligned: Vec<ImageGrid> = bases
        .iter()
        .zip(flows)
        .map(|(b, f)| {
            if f.is_zero() {
                b.clone()
            } else {
                pullback(b, &f.negated())
            }
        })
        .collect();

    let fused = match weights {
        BaseFusionWeights::Exposure => {
            let esum: f64 = exposures.iter().sum();
            let mut acc = vec![0.0; w * h];
            for (img, &e) in aligned.iter().zip(exposures) {
                for (a, &v) in acc.iter_mut().zip(img.data()) {
                    *a += e * v;
                }
            }
            for a in &mut acc {
                *a /= esum;
            }
            ImageGrid::new(w, h, acc).expect("finite by construction")
        }
        BaseFusionWeights::Mle { alpha, beta } => {
            let mut acc = vec![0.0; w * h];
            let mut samples = vec![0.0; aligned.len()];
            for (p, a) in acc.iter_mut().enumerate() {
                for (k, img) in aligned.iter().enumerate() {
                    samples[k] = img.data()[p];
                }
                *a = granados_mle_default(&samples, exposures, alpha, beta).value;
            }
            ImageGrid::new(w, h, acc).expect("finite by construction")
        }
    };

    Ok(zoom_bilinear(&fused, s))
}

/// Base-domain noise parameters implied by the acquisition noise model:
/// smoothing by G turns the variance law a*e*I + b into
/// (alpha*e*I + beta) / e^2 on normalized bases, with alpha and beta the
/// original parameters scaled by the kernel's squared-tap sum.
pub fn base_noise_params(model: &NoiseModel, kernel: &Kernel) -> (f64, f64) {
    let g2 = kernel.sum_sq();
    (model.a * g2, model.b * g2)
}

/// Result of the iterative weighted-average estimator.
#[derive(Clone, Copy, Debug)]
pub struct MleEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iterative weighted average estimating the irradiance behind multi-exposure
/// samples `z_i` with variances (alpha * e_i * y + beta) / e_i^2: weights are
/// the inverse variances, re-evaluated at the running estimate until it moves
/// by less than `tol`. Non-convergence after `max_iter` returns the last
/// iterate flagged `converged = false`.
pub fn granados_mle(
    z: &[f64],
    exposures: &[f64],
    alpha: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> MleEstimate {
    assert!(!z.is_empty(), "need at least one sample");
    assert_eq!(z.len(), exposures.len(), "samples and exposures must align");
    assert!(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0, "need alpha >= 0, beta > 0 or alpha > 0");

    let weight = |y: f64, e: f64| -> f64 {
        let denom = (alpha * e * y.max(0.0) + beta).max(1e-300);
        e * e / denom
    };

    let estimate = |weights: &[f64]| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (w, &zi) in weights.iter().zip(z) {
            num += w * zi;
            den += w;
        }
        num / den
    };

    // First weights use the samples themselves (clamped at zero).
    let mut weights: Vec<f64> = z.iter().zip(exposures).map(|(&zi, &e)| weight(zi, e)).collect();
    let mut y = estimate(&weights);
    for it in 1..=max_iter {
        for (w, &e) in weights.iter_mut().zip(exposures) {
            *w = weight(y, e);
        }
        let next = estimate(&weights);
        let delta = (next - y).abs();
        y = next;
        if delta < tol {
            return MleEstimate { value: y, converged: true, iterations: it };
        }
    }
    MleEstimate { value: y, converged: false, iterations: max_iter }
}

/// [`granados_mle`] with tol = 1e-6 * max|z| and at most 50 iterations.
pub fn granados_mle_default(z: &[f64], exposures: &[f64], alpha: f64, beta: f64) -> MleEstimate {
    let scale = z.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    granados_mle(z, exposures, alpha, beta, 1e-6 * scale, 50)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seed_rng, SeedRng};
    use rand::Rng;

    fn random_image(rng: &mut SeedRng, w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, |_, _| rng.gen_range(0.0..3000.0))
    }

    #[test]
    fn constant_decomposes_to_base_only() {
        let c = ImageGrid::from_fn(16, 16, |_, _| 42.0);
        let pair = decompose(&c, DETAIL_SIGMA);
        for (b, d) in pair.base.data().iter().zip(pair.detail.data()) {
            assert!((b - 42.0).abs() < 1e-12);
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_has_zero_detail_in_interior() {
        // A symmetric kernel annihilates degree-1 terms away from borders.
        let ramp = ImageGrid::from_fn(24, 24, |x, y| 3.0 * x as f64 - 2.0 * y as f64 + 5.0);
        let pair = decompose(&ramp, DETAIL_SIGMA);
        let r = 4; // gaussian radius at sigma 1
        for y in r..24 - r {
            for x in r..24 - r {
                assert!(pair.detail.get(x, y).abs() < 1e-9, "detail at ({x},{y})");
            }
        }
    }

    #[test]
    fn recompose_round_trip() {
        let mut rng = seed_rng(31);
        let img = random_image(&mut rng, 20, 14);
        let pair = decompose(&img, DETAIL_SIGMA);
        let back = recompose(&pair).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let c = ImageGrid::from_fn(4, 4, |_, _| 9.0);
        let z = ImageGrid::zeros(4, 4);
        assert_eq!(recompose(&BaseDetailPair { base: c.clone(), detail: z.clone() }).unwrap(), c);
        let d = ImageGrid::from_fn(4, 4, |x, _| x as f64);
        assert_eq!(recompose(&BaseDetailPair { base: z, detail: d.clone() }).unwrap(), d);
    }

    #[test]
    fn decompose_is_linear() {
        let mut rng = seed_rng(32);
        let x = random_image(&mut rng, 12, 12);
        let y = random_image(&mut rng, 12, 12);
        let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let combo = x.zip(&y, |u, v| a * u + b * v).unwrap();
        let lhs = decompose(&combo, DETAIL_SIGMA);
        let dx = decompose(&x, DETAIL_SIGMA);
        let dy = decompose(&y, DETAIL_SIGMA);
        for i in 0..lhs.detail.data().len() {
            let rhs = a * dx.detail.data()[i] + b * dy.detail.data()[i];
            assert!((lhs.detail.data()[i] - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn exposure_error_lands_mostly_in_the_base() {
        // Scaling the image scales both bands exactly; on natural content the
        // detail mass is far below the base mass, so the induced detail error
        // stays proportionally small.
        let mut rng = seed_rng(33);
        let img = crate::noise::synthesize_hr(48, 48, &mut rng);
        let delta = 0.07;
        let scaled = img.scaled(1.0 + delta);
        let p = decompose(&img, DETAIL_SIGMA);
        let ps = decompose(&scaled, DETAIL_SIGMA);
        for i in 0..p.detail.data().len() {
            let expect = (1.0 + delta) * p.detail.data()[i];
            assert!((ps.detail.data()[i] - expect).abs() < 1e-8 * (1.0 + expect.abs()));
        }
        let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        let ratio = l1(p.detail.data()) / l1(p.base.data());
        assert!(ratio < 1.0, "detail/base L1 ratio {ratio} should be below 1");
    }

    #[test]
    fn fuse_single_frame_is_zoomed_base() {
        let mut rng = seed_rng(34);
        let b = random_image(&mut rng, 10, 10);
        let fused = fuse_bases(std::slice::from_ref(&b), &[1.0], &[FlowField::zero()], 2).unwrap();
        let expect = zoom_bilinear(&b, 2);
        assert_eq!(fused, expect);
    }

    #[test]
    fn fuse_weights_by_exposure() {
        let b1 = ImageGrid::from_fn(8, 8, |_, _| 1.0);
        let b2 = ImageGrid::from_fn(8, 8, |_, _| 3.0);
        let fused = fuse_bases(
            &[b1, b2],
            &[1.0, 3.0],
            &[FlowField::zero(), FlowField::zero()],
            2,
        )
        .unwrap();
        for v in fused.data() {
            assert!((v - 2.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn fuse_is_permutation_invariant() {
        let mut rng = seed_rng(35);
        let bases: Vec<ImageGrid> = (0..4).map(|_| random_image(&mut rng, 8, 8)).collect();
        let exposures = [0.5, 1.0, 2.0, 1.5];
        let flows: Vec<FlowField> = (0..4)
            .map(|_| FlowField::translation(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        let a = fuse_bases(&bases, &exposures, &flows, 2).unwrap();

        let perm = [2usize, 0, 3, 1];
        let pb: Vec<ImageGrid> = perm.iter().map(|&i| bases[i].clone()).collect();
        let pe: Vec<f64> = perm.iter().map(|&i| exposures[i]).collect();
        let pf: Vec<FlowField> = perm.iter().map(|&i| flows[i]).collect();
        let b = fuse_bases(&pb, &pe, &pf, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        assert!(matches!(fuse_bases(&[], &[], &[], 2), Err(FuseError::Empty)));
        let b = ImageGrid::zeros(4, 4);
        assert!(matches!(
            fuse_bases(&[b], &[1.0, 2.0], &[FlowField::zero()], 2),
            Err(FuseError::Misaligned { .. })
        ));
    }

    #[test]
    fn mle_constant_samples_fixed_point() {
        let z = [250.0, 250.0, 250.0];
        let e = [0.5, 1.0, 2.0];
        let est = granados_mle_default(&z, &e, 0.02, 1.0);
        assert!((est.value - 250.0).abs() < 1e-9);
        assert!(est.converged);
        assert_eq!(est.iterations, 1);
    }

    #[test]
    fn mle_alpha_zero_closed_form() {
        // With alpha = 0 the weights e^2/beta no longer depend on the
        // estimate, so the very first average is the answer.
        let z = [100.0, 140.0, 90.0];
        let e = [1.0, 2.0, 0.5];
        let est = granados_mle_default(&z, &e, 0.0, 2.0);
        let num: f64 = z.iter().zip(&e).map(|(&zi, &ei)| ei * ei * zi).sum();
        let den: f64 = e.iter().map(|&ei| ei * ei).sum();
        assert!((est.value - num / den).abs() < 1e-9);
    }

    #[test]
    fn mle_high_snr_approaches_exposure_weights() {
        let e = [0.5, 1.0, 2.0, 4.0];
        let y = 3000.0;
        let z: Vec<f64> = e.iter().map(|&ei| y + 0.001 * ei).collect();
        let est = granados_mle_default(&z, &e, 0.05, 0.01);
        let expect: f64 = z.iter().zip(&e).map(|(&zi, &ei)| ei * zi).sum::<f64>() / e.iter().sum::<f64>();
        assert!(
            (est.value - expect).abs() < 1e-3 * expect,
            "mle {} vs exposure-weighted {}",
            est.value,
            expect
        );
    }

    #[test]
    fn mle_satisfies_its_fixed_point_equation() {
        let mut rng = seed_rng(36);
        for _ in 0..20 {
            let m = rng.gen_range(3..9);
            let alpha: f64 = rng.gen_range(0.005..0.05);
            let beta: f64 = rng.gen_range(0.3..3.0);
            let e: Vec<f64> = (0..m).map(|_| 1.3f64.powi(rng.gen_range(-3..=3))).collect();
            let y: f64 = rng.gen_range(200.0..3000.0);
            let z: Vec<f64> = e
                .iter()
                .map(|&ei| {
                    let var = (alpha * ei * y + beta) / (ei * ei);
                    y + var.sqrt() * crate::rng::normal_pair(&mut rng).0
                })
                .collect();
            let scale = z.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let tol = 1e-9 * scale;
            let est = granados_mle(&z, &e, alpha, beta, tol, 200);
            // Re-apply one weighted average at the estimate.
            let mut num = 0.0;
            let mut den = 0.0;
            for (&zi, &ei) in z.iter().zip(&e) {
                let w = ei * ei / (alpha * ei * est.value.max(0.0) + beta);
                num += w * zi;
                den += w;
            }
            assert!((num / den - est.value).abs() <= tol * 2.0);
        }
    }

    #[test]
    fn base_noise_params_scale_by_squared_taps() {
        let m = NoiseModel::default();
        let k = Kernel::gaussian(1.0);
        let (alpha, beta) = base_noise_params(&m, &k);
        let g2 = k.sum_sq();
        assert!((alpha - m.a * g2).abs() < 1e-15);
        assert!((beta - m.b * g2).abs() < 1e-15);
        assert!(g2 < 0.12 && g2 > 0.05, "squared-tap sum {g2}");
    }

    #[test]
    fn mle_fusion_matches_exposure_weights_on_constants() {
        let b1 = ImageGrid::from_fn(6, 6, |_, _| 500.0);
        let b2 = ImageGrid::from_fn(6, 6, |_, _| 500.0);
        let flows = [FlowField::zero(), FlowField::zero()];
        let a = fuse_bases(&[b1.clone(), b2.clone()], &[1.0, 2.0], &flows, 2).unwrap();
        let b = fuse_bases_with(
            &[b1, b2],
            &[1.0, 2.0],
            &flows,
            2,
            BaseFusionWeights::Mle { alpha: 0.01, beta: 1.0 },
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
