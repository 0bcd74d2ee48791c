//! Seeded random streams.
//!
//! Every random consumer derives its generator from a root seed plus a
//! stream index, so sample `i` of a dataset can be regenerated without
//! replaying samples `0..i`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::carray::C64;

pub type SimRng = ChaCha12Rng;

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reserved stream ids that never collide with per-sample streams.
pub mod streams {
    pub const SPLIT_SHUFFLE: u64 = u64::MAX;
    pub const MODEL_INIT: u64 = u64::MAX - 1;
    pub const TRAIN_ORDER: u64 = u64::MAX - 2;
    pub const VALIDATION_NOISE: u64 = u64::MAX - 3;
    /// Sweep grid point `g` uses stream `SWEEP_BASE - g`.
    pub const SWEEP_BASE: u64 = u64::MAX - 1024;
}

pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_normal<R: rand::Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    C64::new(s * std_normal(rng), s * std_normal(rng))
}
