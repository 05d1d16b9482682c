//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` values uniform in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(uniform(rng, n, -1.0, 1.0), shape, &Device::Cpu).expect("shape matches data")
}

/// Scores with ties and a balanced binary labelling.
pub fn scored_labels(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let scores = (0..n)
        .map(|_| (rng.random_range(0.0..1.0f64) * 100.0).round() / 100.0)
        .collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    (scores, labels)
}
