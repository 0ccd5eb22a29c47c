//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`Rng`]. Independent streams for
//! parallel workers come from [`stream`], which keys the ChaCha stream id off
//! the worker index so results never depend on scheduling.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id.wrapping_add(1));
    r
}

/// Draws a fresh seed from a parent stream; used to hand sub-tasks their own
/// reproducible generator.
pub fn child_seed(rng: &mut Rng) -> u64 {
    rng.random::<u64>()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform on the open interval (0, 1).
pub fn uniform_open(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> f64 {
    if uniform(rng) < p {
        1.0
    } else {
        0.0
    }
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn shuffle<T>(rng: &mut Rng, xs: &mut [T]) {
    use rand::seq::SliceRandom;
    xs.shuffle(rng);
}
