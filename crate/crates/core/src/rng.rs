//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha stream derived
//! from `(base seed, stream tag, counter)`. Streams are stateless: the same
//! triple always yields the same generator, so training can resume from a
//! checkpoint without serializing generator internals.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_PARAM_INIT: u64 = 0x01;
pub const STREAM_DATA_GEN: u64 = 0x02;
pub const STREAM_SHUFFLE: u64 = 0x03;
pub const STREAM_AUGMENT: u64 = 0x04;
pub const STREAM_GALLERY_SUBSET: u64 = 0x05;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream)`; equivalent to `counter_rng(seed, stream, 0)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    counter_rng(seed, stream, 0)
}

/// Generator for `(seed, stream, counter)`. Distinct triples give
/// independent streams; identical triples give identical streams.
pub fn counter_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let derived = splitmix64(seed ^ splitmix64(stream ^ splitmix64(counter)));
    ChaCha8Rng::seed_from_u64(derived)
}
