//! Deterministic random streams.
//!
//! Every random draw in the samplers comes from a stream keyed by the master
//! seed plus a path of integers (sampler tag, iteration, slot, ...). Streams
//! never depend on scheduling, so results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub const TAG_TRUTH: u64 = 0x7472_7574;
pub const TAG_SMC: u64 = 0x736d_6361;
pub const TAG_RS: u64 = 0x7273_7273;
pub const TAG_ESMDA: u64 = 0x6573_6d64;
pub const TAG_FIELD: u64 = 0x6669_656c;
pub const TAG_SELECT: u64 = 0x7365_6c65;
pub const TAG_HIER: u64 = 0x6869_6572;
pub const TAG_MODIFIED: u64 = 0x6d6f_6465;
pub const TAG_PRIOR: u64 = 0x7072_696f;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a master seed with a path into a new 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| {
            splitmix64(acc.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ splitmix64(p))
        })
}

pub fn stream(master: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
