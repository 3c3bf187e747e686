//! Covered-hand PIN inference from keypad video and key-feedback audio.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod rank;
pub mod synth;
pub mod video;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mixes `parts` into `base` (splitmix64 finalizer per step) so every
/// recording, keypress or job gets an independent, reproducible seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// FNV-1a, for turning ids into seed material.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
