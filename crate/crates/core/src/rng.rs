//! Seeded random streams.
//!
//! Every random draw in the simulator comes from a ChaCha8 stream keyed by
//! `(seed, domain, a, b)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SAMPLING: u64 = 1;
pub const FADING: u64 = 2;
pub const PLACEMENT: u64 = 3;
pub const PARTITION: u64 = 4;
pub const PROBES: u64 = 5;
pub const NOISE_ESTIMATE: u64 = 6;
pub const DATA: u64 = 7;
pub const VALIDATION: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, domain, a, b))
}

/// Minibatch sampling stream for one device at one time index.
pub fn sampling(seed: u64, device: usize, t: usize) -> ChaCha8Rng {
    stream(seed, SAMPLING, device as u64, t as u64)
}
