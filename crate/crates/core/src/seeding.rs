//! Seed derivation. Every random choice in the crate draws from a ChaCha
//! stream keyed by a 64-bit seed and a purpose tag, so results do not depend
//! on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_PLATES: u64 = 1;
pub const STREAM_PAIRS: u64 = 2;
pub const STREAM_ORDER: u64 = 3;
pub const STREAM_PARTITION: u64 = 4;
pub const STREAM_BOOTSTRAP: u64 = 5;
pub const STREAM_POWER: u64 = 6;
pub const STREAM_PLATE_PACKING: u64 = 7;
pub const STREAM_SESSION_SEEDS: u64 = 8;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; used to derive child seeds such as `mix(seed ^ index)`.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5EED)))
}
