//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a base seed and a tuple of string tags, so results are
//! reproducible across platforms and independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn derive_seed(seed: u64, tags: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    feed(&seed.to_le_bytes());
    for t in tags {
        feed(t.as_bytes());
        // separator so ("ab","c") != ("a","bc")
        feed(&[0xff]);
    }
    h
}

pub fn rng_for(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
