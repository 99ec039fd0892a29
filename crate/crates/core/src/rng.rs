//! Keyed random streams. Every random decision in the engine draws from a
//! generator derived from `(seed, tag, coordinates...)`, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT_RANDOM: u64 = 1;
pub const TAG_INIT_KCENTER: u64 = 2;
pub const TAG_EPOCH_PERMUTATION: u64 = 3;
pub const TAG_RANDOM_TARGET: u64 = 4;
pub const TAG_PROMPTS: u64 = 5;
pub const TAG_SYNTHETIC: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `seed`, `tag` and `coords`.
pub fn stream(seed: u64, tag: u64, coords: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ splitmix64(tag));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
