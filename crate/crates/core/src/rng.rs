//! Seeded random streams. Every consumer derives its own generator from the
//! run seed plus a fixed tag, so adding draws in one place never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DenRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for `(seed, tags...)`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> DenRng {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ splitmix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

pub mod stream {
    pub const ESTIMATOR_INIT: u64 = 1;
    pub const SELECTOR_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const STRUCTURES: u64 = 4;
    pub const EVALUATION: u64 = 5;
    pub const DATA: u64 = 6;
    pub const ANALYSIS: u64 = 7;
}
