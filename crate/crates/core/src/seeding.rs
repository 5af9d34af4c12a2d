//! Sub-seed derivation. Every random stream is derived from a single master
//! seed with [`derive_seed`] so runs are reproducible from one `--seed`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `stream` from `master`:
/// `mix64(master + (stream + 1) · φ64)` with φ64 the 64-bit golden ratio.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix64(master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Stream ids for the different consumers of randomness.
pub mod streams {
    pub const CLASS_DIRECTIONS: u64 = 0xC1A5;
    pub const VIDEO_BASE: u64 = 0x1_0000;
    pub const POINTS_BASE: u64 = 0x2_0000;
    pub const INIT: u64 = 0x3_0000;
    pub const BATCHES: u64 = 0x4_0000;
    pub const SHUFFLES: u64 = 0x5_0000;
    pub const PROXY: u64 = 0x6_0000;
}

pub fn rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
