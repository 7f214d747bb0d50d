//! Seeded randomness. Every stochastic path in the crate draws from a
//! `ChaCha8Rng` so runs are bit-reproducible across platforms.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

pub const STREAM_MODEL: u64 = 1;
pub const STREAM_ADAPTORS: u64 = 2;
pub const STREAM_PROJECTION: u64 = 3;
pub const STREAM_DATA_ORDER: u64 = 4;
pub const STREAM_DROPOUT: u64 = 5;
pub const STREAM_SPLIT: u64 = 6;
pub const STREAM_SCENES: u64 = 7;
pub const STREAM_CODEBOOK: u64 = 8;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, so adding draws to one
/// purpose never shifts another.
pub fn stream(seed: u64, purpose: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub fn normal_vec(rng: &mut DetRng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut DetRng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(rng, n, std)).expect("shape matches draw count")
}

pub fn uniform_tensor(rng: &mut DetRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches draw count")
}

/// Inverted-dropout mask: zeros with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask(rng: &mut DetRng, n: usize, p: f32) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect()
}

/// Random ordering of `0..n`.
pub fn permutation(rng: &mut DetRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
