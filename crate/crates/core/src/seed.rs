//! Named sub-seeds derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the bytes of `name`; stable across platforms and releases.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// `seed + hash(component)`.
pub fn derive(seed: u64, component: &str) -> u64 {
    seed.wrapping_add(stable_hash(component))
}

pub fn rng(seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, component))
}
