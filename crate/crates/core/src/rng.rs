//! Named random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-seed names used across the pipeline.
pub mod stream {
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const BATCHING: &str = "batching";
    pub const SHUFFLE_ABLATION: &str = "shuffle-ablation";
    pub const GENERATOR: &str = "generator";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name.as_bytes()))
}

pub fn sub_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}
