//! Seeded random streams.
//!
//! The generator is ChaCha8 keyed by `seed` (expanded with `SeedableRng::seed_from_u64`)
//! and selecting ChaCha's 64-bit stream id. Gaussian draws use the ziggurat sampler from
//! `rand_distr`. Both are portable and bit-reproducible across platforms.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Keyed substream: depends only on `(seed, stream, index)`, not on how far
    /// this stream has advanced. Used to hand one stream to each seed/worker.
    pub fn substream(&self, index: u64) -> RngStream {
        let key = self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1);
        Self::with_stream(self.seed ^ 0xD1B5_4A32_D192_ED03, key)
    }

    /// Advancing split: draws a fresh seed from this stream.
    pub fn split(&mut self) -> RngStream {
        let seed = self.rng.next_u64();
        Self::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Result<Tensor> {
        gaussian_sample(self, shape)
    }
}

/// I.i.d. standard-normal tensor of the given shape.
pub fn gaussian_sample(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(FlowError::invalid(format!("cannot sample zero-sized shape {shape:?}")));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian_sample(&mut RngStream::new(7), &[2]).unwrap();
        let b = gaussian_sample(&mut RngStream::new(7), &[2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_shape_rejected() {
        let mut rng = RngStream::new(1);
        assert!(gaussian_sample(&mut rng, &[0, 2]).is_err());
        assert!(gaussian_sample(&mut rng, &[]).is_err());
    }

    #[test]
    fn moments_converge() {
        let x = gaussian_sample(&mut RngStream::new(11), &[100_000]).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (x.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn substreams_uncorrelated() {
        let root = RngStream::new(3);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let mut s = root.substream(k);
                (0..n).map(|_| s.normal()).collect()
            })
            .collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                let c = correlation(&draws[i], &draws[j]);
                assert!(c.abs() < 0.05, "corr({i},{j}) = {c}");
            }
        }
        // split() streams as well
        let mut parent = RngStream::new(3);
        let mut a = parent.split();
        let mut b = parent.split();
        let xa: Vec<f64> = (0..n).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..n).map(|_| b.normal()).collect();
        assert!(correlation(&xa, &xb).abs() < 0.05);
    }

    #[test]
    fn substream_independent_of_position() {
        let mut a = RngStream::new(5);
        let b = RngStream::new(5);
        a.normal();
        assert_eq!(a.substream(2).normal(), b.substream(2).normal());
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx * vy).sqrt()
    }
}
