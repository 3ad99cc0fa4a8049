//! Shared fixtures for the kernel benchmarks.

use xmkd_core::transport::CostMatrix;
use xmkd_core::{Rng, Tensor};

/// Squared-distance cost between two random point clouds of `n` points.
pub fn random_cost(n: usize, dim: usize, seed: u64) -> CostMatrix {
    let mut rng = Rng::new(seed);
    let x = Tensor::randn(&[n, dim], 1.0, &mut rng);
    let y = Tensor::randn(&[n, dim], 1.0, &mut rng);
    xmkd_core::transport::cost_matrix(&x, &y).expect("matching dims")
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
