//! Seed splitting.
//!
//! A single master seed reproduces a whole run. Each consumer asks for a
//! sub-seed on its own named stream:
//!
//! ```text
//! derive(master, stream, index) = mix(mix(master ^ mix(stream)) ^ index)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Streams are small constants, so
//! adding a new consumer never shifts the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-seed streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Folds = 1,
    Train = 2,
    Init = 3,
    Shuffle = 4,
    Dropout = 5,
    Projection = 6,
}

/// SplitMix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(master ^ mix(stream as u64)) ^ index)
}

pub fn rng(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, 0))
}
