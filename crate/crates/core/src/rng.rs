//! Seed derivation and purpose-specific random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed that is itself derived from a root seed and a [`Stream`] tag,
//! so results never depend on the order in which independent pieces of work
//! are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Catalog = 1,
    Viewers = 2,
    Sets = 3,
    Exposure = 4,
    Noise = 5,
    Folds = 6,
    Init = 7,
    Shuffle = 8,
    Hessian = 9,
    Oracle = 10,
    Replication = 11,
    Check = 12,
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with an index and a tag into a new 64-bit seed.
pub fn mix(seed: u64, index: u64, tag: u64) -> u64 {
    let a = splitmix64(seed ^ 0x6A09_E667_F3BC_C908);
    let b = splitmix64(a ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ tag.wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn derive(seed: u64, stream: Stream) -> u64 {
    mix(seed, 0, stream as u64)
}

pub fn stream(seed: u64, stream: Stream) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}

pub fn indexed_stream(seed: u64, index: u64, stream: Stream) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, index, stream as u64))
}
