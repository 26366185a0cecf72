//! Deterministic seed derivation.

/// SplitMix64 finalizer over `base` and `tag`.
pub fn derive(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a path of tags, e.g. `derive_path(run, &[iteration, stream])`.
pub fn derive_path(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |s, &t| derive(s, t))
}
