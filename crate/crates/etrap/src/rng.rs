//! Deterministic seed derivation for independent substreams.
//!
//! Sweep cells, ensemble members, and Monte Carlo cycles each get their own
//! RNG seeded from (base seed, counter) so results do not depend on
//! evaluation order or worker count.

/// SplitMix64-style avalanche of a (seed, counter) pair into a substream seed.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
