//! Seeded random streams.
//!
//! Every stochastic step draws from its own generator, derived from the run
//! seed plus a purpose tag and up to two coordinates (epoch, batch, period,
//! ...). Skipping one sampler therefore never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    RecSamples = 4,
    SslSamples = 5,
    Dropout = 6,
    Noise = 7,
    Synthetic = 8,
    Eval = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut h = splitmix(seed);
    for word in [purpose as u64, a, b] {
        h = splitmix(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}
