//! Deterministic random number generation.
//!
//! Every stochastic routine in this crate takes an explicit generator owned
//! by the caller; there is no global RNG. The generator is ChaCha8, a
//! counter-based stream cipher: a seed fully determines the draw sequence,
//! and independent streams can be split off cheaply for parallel work.
//! Gaussian variates use the Box-Muller transform, so the number of uniforms
//! consumed per call is fixed and reproducibility does not depend on a
//! rejection loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The seeded generator used across the crate.
pub type SeedRng = ChaCha8Rng;

/// Generator for `seed`, stream 0.
pub fn seed_rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of `seed`, e.g. one per generated sequence.
pub fn substream(seed: u64, index: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// One standard normal pair via Box-Muller.
pub fn normal_pair(rng: &mut SeedRng) -> (f64, f64) {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// One draw from N(mean, sigma^2).
pub fn normal(rng: &mut SeedRng, mean: f64, sigma: f64) -> f64 {
    mean + sigma * normal_pair(rng).0
}

/// One uniform draw from [lo, hi).
pub fn uniform(rng: &mut SeedRng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
