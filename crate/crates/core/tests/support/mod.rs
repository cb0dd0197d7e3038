//! Independent oracles shared by the core test suites and the acceptance
//! runner. Every `check_*` panics on violation and otherwise returns a short
//! summary of what it measured.
#![allow(dead_code)]

pub mod grads;
pub mod losses;
pub mod metrics;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_probs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
}

pub fn rand_binary(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| f64::from(rng.random_bool(p)))
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| rng.random_bool(p))
}
