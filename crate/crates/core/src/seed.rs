//! Seed derivation. One master seed fans out to independent stage and item
//! seeds, so results never depend on the order in which stages run.

use sha2::{Digest, Sha256};

/// Mixes `tag` into `base` (SplitMix64 finalizer).
pub fn derive(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named stage or item.
pub fn named(base: u64, name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    derive(
        base,
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")),
    )
}
