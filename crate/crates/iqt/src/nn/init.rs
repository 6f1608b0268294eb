//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Glorot (Xavier) normal init: i.i.d. draws with
/// std = sqrt(2 / (fan_in + fan_out)). For convolutions the fans are
/// channels times kernel volume.
pub fn glorot_normal(fan_in: usize, fan_out: usize, count: usize, rng: &mut impl Rng) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..count).map(|_| dist.sample(rng)).collect()
}
