//! Keyed RNG streams.
//!
//! Every random draw in a run comes from a stream identified by the run seed
//! plus a small tuple of integers (client, round, phase, ...). Streams never
//! depend on scheduling, which is what makes multi-threaded runs reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn keyed(seed: u64, key: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, key))
}

// Stream tags, so unrelated draws with the same numeric key never collide.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_DATA: u64 = 2;
pub(crate) const TAG_BATCH: u64 = 3;
pub(crate) const TAG_SHIFT: u64 = 4;
