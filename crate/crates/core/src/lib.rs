//! Multi-exposure multi-image super-resolution for push-frame imagery.
//!
//! The crate covers the full numerical pipeline:
//!
//! - [`image`]: raster grids, resampling primitives, PSNR, and the bit-exact
//!   on-disk container shared by every tool ([`container`]).
//! - [`noise`]: the affine signal-dependent noise model and the synthetic
//!   multi-exposure sequence generator.
//! - [`base_detail`]: base-detail decomposition and robust high-resolution
//!   base fusion, including the iterative maximum-likelihood estimator.
//! - [`register`]: subpixel translation estimation (phase correlation plus
//!   inverse-compositional refinement), warping, and exposure-ratio
//!   estimation.
//! - [`splat`]: differentiable bilinear splatting onto the upscaled grid and
//!   permutation-invariant temporal pooling, with analytic gradients.
//! - [`net`]: a minimal reverse-mode autodiff engine, the reduced
//!   encoder/decoder, the self-supervised loss with grid shifting, Adam, and
//!   the training loop.
//! - [`pipeline`]: classical reconstruction baselines and the evaluation
//!   harness behind the `mesr` CLI.

pub mod base_detail;
pub mod container;
pub mod image;
pub mod net;
pub mod noise;
pub mod pipeline;
pub mod register;
pub mod rng;
pub mod splat;

pub use container::LRSequence;
pub use image::{ImageGrid, Kernel};
pub use noise::NoiseModel;
pub use register::FlowField;
