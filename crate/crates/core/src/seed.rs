//! Seed derivation and the deterministic PRNG used everywhere.
//!
//! All randomness in the crate flows from one master seed through
//! [`derive_seed`], so parallel execution order never changes an output.
//! The hash is FNV-1a, written out by hand so derived seeds stay stable
//! across toolchain and dependency upgrades.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive a task seed from a base seed and a label (e.g. an image id or an
/// operation name). XOR keeps the master seed's entropy; the label hash
/// separates tasks.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    base ^ fnv1a64(label.as_bytes())
}

/// Derive a task seed keyed by label and index.
pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = fnv1a64(label.as_bytes());
    for &b in index.to_le_bytes().iter() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    base ^ h
}

/// The crate-wide PRNG.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// In-place Fisher-Yates shuffle driven by an explicit RNG.
///
/// Written out rather than delegated so the shuffle order is pinned by this
/// crate, not by whichever rand version is linked.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    if items.len() < 2 {
        return;
    }
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
