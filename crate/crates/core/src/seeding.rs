//! Independent deterministic random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Each consumer draws from its own stream so that, for
/// example, batch order never depends on how much noise has been drawn.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const INTERPOLATION: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SHIFT: u64 = 7;
    pub const POWER_ITERATION: u64 = 8;
}

/// Seed of a per-set batch stream: tag 0 is the labeled target, 1 the
/// unlabeled target, `2 + i` source `i`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
