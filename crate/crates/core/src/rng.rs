//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! user seed. Independent consumers get disjoint 64-bit stream ids built as
//! `(domain << 48) | index`, so pair `k` of a simulation, resample `b` of a
//! bootstrap, or replicate `r` of an experiment always see the same numbers
//! regardless of scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Indices within a domain must stay below 2^48.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Covariates = 1,
    PairEvents = 2,
    Multipliers = 3,
    Replicates = 4,
}

/// Generator for item `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << 48));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | index);
    rng
}

/// Derive a child seed (e.g. one per Monte-Carlo replicate) by SplitMix64 mixing.
pub fn child_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
