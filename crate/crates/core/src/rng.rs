//! Seeded random sources. Every stochastic path in the crate draws from a
//! [`Rng`], so a fixed seed reproduces a run bit-for-bit.

use alloc::vec::Vec;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Open01, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent child stream, e.g. one per dropout mask.
pub fn fork(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.random())
}

pub fn open01(rng: &mut Rng) -> f64 {
    Open01.sample(rng)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n × dim` matrix of independent standard normals.
pub fn standard_normal(n: usize, dim: usize, rng: &mut Rng) -> Tensor {
    let data: Vec<f64> = (0..n * dim).map(|_| normal(rng)).collect();
    Tensor::matrix(n, dim, data)
}
