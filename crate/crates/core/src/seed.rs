//! Seed derivation for independent random streams.
//!
//! Every random draw in the simulator (client shuffles, client selection,
//! subsampling, initialization) comes from a `ChaCha8Rng` whose seed is a
//! pure function of the experiment seed and a stream path, so runs are
//! reproducible regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of stream identifiers.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags, so unrelated consumers of one seed never collide.
pub mod stream {
    pub const INIT: u64 = 0x1417;
    pub const SHUFFLE: u64 = 0x5_4ff1e;
    pub const SELECT: u64 = 0x5e1ec7;
    pub const PARTITION: u64 = 0x9a27;
    pub const HOLDOUT: u64 = 0x401d;
    pub const SUBSAMPLE: u64 = 0x5ab5;
    pub const CLIENT: u64 = 0xc11e;
}
