//! Seed derivation. Every random decision in a run draws from a stream keyed
//! by `(run seed, entity, epoch, purpose)`, so results never depend on the
//! order in which concurrent work happens to execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes. Stable across platforms and toolchains, unlike
/// `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of words into one well-mixed seed.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for a piece of text under a run seed.
pub fn text_seed(seed: u64, text: &str) -> u64 {
    derive(seed, &[fnv1a64(text.as_bytes())])
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Purpose tags for [`stream`]; keeps unrelated draws on disjoint streams.
pub mod purpose {
    pub const FORMATION: u64 = 1;
    pub const TEAM_SIZE: u64 = 2;
    pub const SELECTION: u64 = 3;
    pub const REVIEWERS: u64 = 4;
    pub const AGENT: u64 = 5;
    pub const SYNTH: u64 = 6;
}
