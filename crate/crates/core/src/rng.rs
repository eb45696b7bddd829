//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from the global seed plus a label path, so independent components (weight
//! init per head, shuffling, per-sample noise) consume independent streams.
//! Adding or removing one consumer never shifts the draws seen by another,
//! which is what makes the λ=0 / hair-branch-free bitwise equivalence hold.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a label into a seed, producing a new derived seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label.as_bytes()))
}

/// Mix an index into a seed (per-sample, per-fold, per-epoch streams).
pub fn derive_seed_index(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5bf0_3635)))
}

/// RNG for the stream named by `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// RNG for the `index`-th member of the stream named by `label`.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_index(derive_seed(seed, label), index))
}
