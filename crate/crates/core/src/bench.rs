//! Small 1-D regression benchmark used to sanity-check training and search.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::SampleSet;
use crate::rng;

/// Standard deviation of the additive noise on sine targets.
pub const SINE_NOISE: f64 = 0.05;

/// `n` points with `x ~ U(-pi, pi)` and `y = sin(x) + 0.05 eps`. The single
/// input column is `x / pi`.
pub fn sine(n: usize, seed: u64) -> SampleSet {
    let mut r = rng::stream(seed, &[0x5117E]);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = r.random_range(-1.0..1.0);
        let eps: f64 = StandardNormal.sample(&mut r);
        inputs.push(u);
        targets.push(libm::sin(u * core::f64::consts::PI) + SINE_NOISE * eps);
    }
    SampleSet { dim: 1, inputs, targets, groups: Vec::new() }
}

/// Independent train and validation draws.
pub fn sine_splits(n_train: usize, n_val: usize, seed: u64) -> (SampleSet, SampleSet) {
    (sine(n_train, rng::derive_seed(seed, &[0])), sine(n_val, rng::derive_seed(seed, &[1])))
}
