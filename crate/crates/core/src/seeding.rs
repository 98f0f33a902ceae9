//! Deterministic RNG derivation.
//!
//! Every stochastic component derives its own stream from a master seed
//! plus a set of integer coordinates (trajectory index, epoch, sample
//! slot, ...). Streams are independent of thread scheduling and of how
//! many items run in parallel, which keeps multi-worker runs and
//! restarted runs bit-identical to the single-worker baseline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used throughout the crate. ChaCha gives identical output on every
/// platform and supports cheap independent streams.
pub type Rng = ChaCha8Rng;

/// Derives an independent RNG for a numbered item (for example one
/// trajectory out of an ensemble) from the run seed.
pub fn stream_rng(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives an RNG from a seed and a list of coordinates, for cases that
/// need more than one index (epoch, batch, sample slot, ...).
///
/// Coordinates are folded with the SplitMix64 finalizer so that nearby
/// tuples map to unrelated streams.
pub fn coord_rng(seed: u64, coords: &[u64]) -> Rng {
    let mut acc = seed;
    for &c in coords {
        acc = splitmix64(acc ^ splitmix64(c));
    }
    ChaCha8Rng::seed_from_u64(acc)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
