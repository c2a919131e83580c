//! Named, seed-derived random streams.
//!
//! Every random decision in the crate draws from a stream keyed by
//! `(seed, name, extra...)`, so one component can be replayed without the
//! others having consumed numbers first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 64-bit key for a named sub-stream.
pub fn stream_key(seed: u64, name: &str, extra: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    h = fnv1a(h, name.as_bytes());
    for e in extra {
        h = fnv1a(h, &e.to_le_bytes());
    }
    mix(h)
}

pub fn stream(seed: u64, name: &str, extra: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, name, extra))
}
