//! Deterministic seed fan-out.
//!
//! A single run seed is expanded into independent per-stage seeds with
//! splitmix64 over the stage name, so any stage can be rerun in isolation and
//! reproduce its part of a run bit for bit.

/// One splitmix64 step; a full-period 64-bit mixer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives the seed for a named stage from the run seed:
/// `splitmix64(run_seed ^ fnv1a64(stage))`.
pub fn stage_seed(run_seed: u64, stage: &str) -> u64 {
    splitmix64(run_seed ^ fnv1a64(stage.as_bytes()))
}

/// Derives the seed for the `index`-th item within a stage (one subject, one
/// augmentation draw): a second splitmix64 step over the stage seed and index.
pub fn item_seed(stage_seed: u64, index: u64) -> u64 {
    splitmix64(stage_seed ^ splitmix64(index))
}
