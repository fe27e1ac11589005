//! Deterministic seed derivation for independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers (client id, round, ...).
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, path))
}

/// Stream tags so that different consumers of the same seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CLIENT: u64 = 2;
    pub const FLAME: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const MALICIOUS: u64 = 5;
    pub const SURROGATE: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const DATA: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_paths_distinct_seeds() {
        let a = derive(7, &[stream::CLIENT, 0, 1]);
        let b = derive(7, &[stream::CLIENT, 1, 0]);
        let c = derive(7, &[stream::CLIENT, 0, 1]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
