//! Seed derivation: one root seed, named sub-streams, indexed per-item seeds.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` seeded
//! through these helpers, so a run is a pure function of the root seed and
//! two runs with the same root seed are bitwise identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; decorrelates related inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed of the named sub-stream of `root`.
pub fn stream(root: u64, name: &str) -> u64 {
    mix(root ^ fnv1a(name.as_bytes()))
}

/// Seed for item `index` within a stream (per-sample, per-epoch, ...).
pub fn indexed(stream_seed: u64, index: u64) -> u64 {
    mix(stream_seed ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}

pub fn rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream(root, name))
}

pub fn rng_indexed(stream_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(indexed(stream_seed, index))
}
