//! Seed derivation: one root seed, expanded per purpose and index.
//!
//! Every source of randomness in the crate draws from a `ChaCha12Rng` seeded
//! through [`derive_seed`], so that independent purposes (data sampling,
//! target sampling, masking, parameter init, ...) get decorrelated streams
//! and per-item streams are order-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a decorrelated sub-seed from `(root, purpose, index)`.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let s = splitmix64(root ^ fnv1a(purpose.as_bytes()));
    splitmix64(s ^ index)
}

/// A seeded RNG stream for one `(root, purpose, index)` triple.
pub fn stream(root: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, purpose, index))
}
