//! Counter-based seed derivation. Every random decision in the pipeline is
//! drawn from a generator seeded by `derive(base, stream, index)`, so results
//! never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named random streams so unrelated draws never share a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Augment = 3,
    Action = 4,
    Corrupt = 5,
    Synth = 6,
    Eval = 7,
}

pub fn derive(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(stream as u64)) ^ index)
}

pub fn derive2(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    splitmix(derive(base, stream, a) ^ splitmix(b.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
