//! Deterministic random streams keyed by `(master seed, path...)`.
//!
//! Every repetition, algorithm and environment draws from its own ChaCha8
//! stream, so results do not depend on scheduling or on which other runs
//! are part of an experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `master` refined by each component of `path` in order.
pub fn derive(master: u64, path: &[u64]) -> Stream {
    let mut key = splitmix64(master);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Well-known path components.
pub mod tag {
    pub const ENVIRONMENT: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const REWARD: u64 = 6;
    pub const GRAPHS: u64 = 7;
}
