//! Deterministic RNG streams.
//!
//! Every randomized stage derives an independent ChaCha8 stream from a
//! user seed, a static tag, and optional indices. Parallel and serial
//! consumers of per-index streams therefore agree bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn mix_tag(tag: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in tag {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stream for a stage identified by `tag`.
pub fn stream(seed: u64, tag: &[u8]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ mix_tag(tag)))
}

/// Per-index stream, e.g. one per dataset sample or RANSAC iteration.
pub fn indexed_stream(seed: u64, tag: &[u8], index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        splitmix64(seed ^ mix_tag(tag)).wrapping_add(splitmix64(index.wrapping_add(1))),
    ))
}
