//! Portable seed derivation. Every random stream in a run is a ChaCha8
//! generator keyed by a master seed and a short path of stream tags, so
//! streams are independent of each other and of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags for the independent random streams of a run.
pub mod stream {
    pub const GENERATOR: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const POOL_INIT: u64 = 3;
    pub const TASK_PROMPT: u64 = 4;
    pub const DATA_ORDER: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const CLUSTER: u64 = 7;
    pub const CURRICULUM: u64 = 8;
    pub const ENCODER: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive(42, &[1, 2]), derive(42, &[1, 2]));
        assert_ne!(derive(42, &[1, 2]), derive(42, &[2, 1]));
        assert_ne!(derive(42, &[1]), derive(43, &[1]));
        // Pinned so that platform or refactoring changes are caught.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
