//! Counter-based seeded randomness: every consumer derives its own stream
//! from `(root seed, tag path)`, so results never depend on evaluation
//! order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags for the fixed consumers.
pub mod streams {
    pub const INIT: u64 = 0x01;
    pub const DROPOUT: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const SAMPLING: u64 = 0x04;
    pub const SPEAKER: u64 = 0x05;
    pub const UTTERANCE: u64 = 0x06;
    pub const CONTENT: u64 = 0x07;
    pub const PAIRING: u64 = 0x08;
    pub const WORLD: u64 = 0x09;
}

/// splitmix64 finalizer; decorrelates nearby seeds and tags.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a deterministic rng for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// `n` draws from a standard normal.
pub fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
