//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the global
//! seed plus a tuple of integers (sample id, epoch, purpose tag, ...). Two
//! streams with different keys are independent, and the value drawn for a
//! given key never depends on the order in which samples are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different transforms apart.
pub mod tag {
    pub const HIDE: u64 = 0x4849_4445;
    pub const MIXED: u64 = 0x4d49_5845;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const INIT: u64 = 0x494e_4954;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const FEATURE: u64 = 0x4645_4154;
    pub const EVAL: u64 = 0x4556_414c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with an ordered list of keys into a new 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
