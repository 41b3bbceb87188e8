//! Deterministic seed derivation.
//!
//! All randomness in this crate flows from explicit `u64` seeds. Independent
//! substreams (weight init, augmentation draws, epoch shuffles, validation
//! passes, ...) get their own seeds through [`derive_seed`], so any point in
//! training or evaluation can be reproduced without replaying RNG history.
//! That property is what makes checkpoint resume bit-exact: the seed for
//! epoch `e`, step `s` is a pure function of the base seed, never of how many
//! draws happened before.

/// splitmix64 finalizer. Small, well-mixed, and stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a list of stream/index words.
///
/// Chaining a mix per word keeps `derive_seed(b, &[x, y])` distinct from
/// `derive_seed(b, &[y, x])` and from any single-word call.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &w in words {
        acc = splitmix64(acc ^ w);
    }
    acc
}
