//! Deterministic sub-seed derivation.

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of
/// integers (stream tag, epoch, sample index, ...).
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub mod stream {
    pub const IDENTITY_SHAPE: u64 = 1;
    pub const OUTFIT_COLOR: u64 = 2;
    pub const IMAGE_RENDER: u64 = 3;
    pub const CAMERA: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const EPOCH_ORDER: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
}
