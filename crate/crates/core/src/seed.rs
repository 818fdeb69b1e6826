//! Seed derivation. Every random quantity in the pipeline is drawn from a
//! ChaCha stream keyed by a seed derived from a root seed and a tag path, so
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tags separating the independent seed namespaces.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_DATA: u64 = 2;
    pub const FINETUNE_DATA: u64 = 3;
    pub const STEP: u64 = 4;
    pub const ANATOMY: u64 = 5;
    pub const DEFORM: u64 = 6;
    pub const PICK: u64 = 7;
    pub const MASK: u64 = 8;
    pub const AUGMENT: u64 = 9;
    pub const HEAD_INIT: u64 = 10;
    pub const ORDER: u64 = 11;
    pub const LESION: u64 = 12;
}
