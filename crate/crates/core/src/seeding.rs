//! Deterministic derivation of independent seeds from a master seed.

/// SplitMix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `parent` and a stream label.
///
/// Distinct labels give statistically unrelated streams; the mapping is a
/// pure function so every caller reproduces the same child.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    mix64(mix64(parent) ^ mix64(label.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
