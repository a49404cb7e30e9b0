//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a generator keyed by
//! `(master seed, item key)`, so results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and Rust versions (unlike `DefaultHasher`).
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, key: &[u8]) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(key)))
}

pub fn item_rng(seed: u64, key: &[u8]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, key))
}

pub fn indexed_rng(seed: u64, domain: &str, index: u64) -> Rng {
    let mut key = domain.as_bytes().to_vec();
    key.extend_from_slice(&index.to_le_bytes());
    item_rng(seed, &key)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
