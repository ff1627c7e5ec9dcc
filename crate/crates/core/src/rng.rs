//! Splittable seeding: one 64-bit seed, one independent ChaCha stream per neuron.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Generator for neuron `i`; adding neurons never perturbs existing streams.
pub fn neuron_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

/// `n` independent N(0, std²) draws.
pub fn gaussian<R: rand::Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}
