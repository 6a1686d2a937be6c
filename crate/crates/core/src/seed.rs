//! Seed derivation.
//!
//! Every stochastic call site gets its own seed derived from the run seed and
//! a coordinate tuple, so results never depend on execution order. Streams are
//! ChaCha8, whose output is stable across platforms and crate versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Fold a sequence of words into one seed. Order matters.
pub fn combine(parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(GOLDEN), |acc, &p| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(p.wrapping_add(GOLDEN)))
    })
}

/// `hash(run_seed, chain, iteration, role)`.
pub fn derive(run_seed: u64, chain: u64, iteration: u64, role: &str) -> u64 {
    combine(&[run_seed, chain, iteration, fnv1a64(role.as_bytes())])
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed by a seed and a label, for sub-decisions inside one call.
pub fn sub_rng(seed: u64, label: &str) -> SimRng {
    rng(combine(&[seed, fnv1a64(label.as_bytes())]))
}
