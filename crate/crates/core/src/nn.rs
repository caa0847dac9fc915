//! Flat-parameter building blocks shared by the MLP and the mini-DiT.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::numerics::RngStream;

/// Named `rows × cols` block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let offset = self.total;
        self.segments.push(Segment { name: name.into(), offset, rows, cols });
        self.total += rows * cols;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Pushes a weight `out × inp` and, if requested, a bias `out`.
    pub fn dense(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Dense {
        let w = self.push(format!("{name}.w"), out, inp);
        let b = bias.then(|| self.push(format!("{name}.b"), out, 1));
        Dense { w, b, out, inp }
    }
}

/// Offsets of an affine map `y = W x + b` with row-major `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: Option<usize>,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        debug_assert_eq!(y.len(), self.out);
        let w = &p[self.w..self.w + self.out * self.inp];
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &w[r * self.inp..(r + 1) * self.inp];
            let mut acc = match self.b {
                Some(b) => p[b + r],
                None => 0.0,
            };
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *yr = acc;
        }
    }

    pub fn apply(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out];
        self.forward(p, x, &mut y);
        y
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and, when given, `dx += Wᵀ dy`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let n = self.inp;
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let gw = &mut grad[self.w + r * n..self.w + (r + 1) * n];
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
        if let Some(b) = self.b {
            for (r, &g) in dy.iter().enumerate() {
                grad[b + r] += g;
            }
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.out * n];
            for (r, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, wi) in dx.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                    *d += g * wi;
                }
            }
        }
    }

    /// Gaussian weights with variance `gain² / inp`, zero bias.
    pub fn init(&self, p: &mut [f64], rng: &mut RngStream, gain: f64) {
        let std = gain / (self.inp as f64).sqrt();
        for w in &mut p[self.w..self.w + self.out * self.inp] {
            *w = std * rng.normal();
        }
        if let Some(b) = self.b {
            p[b..b + self.out].fill(0.0);
        }
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(f_k σ), cos(f_k σ)]` for `features / 2` frequencies spaced geometrically in `[1, max_freq]`.
pub fn sinusoidal_embedding(sigma: f64, features: usize, max_freq: f64) -> Vec<f64> {
    let half = features / 2;
    let mut out = Vec::with_capacity(2 * half);
    for k in 0..half {
        let f = if half > 1 { max_freq.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out.push((f * sigma).sin());
    }
    for k in 0..half {
        let f = if half > 1 { max_freq.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out.push((f * sigma).cos());
    }
    out
}

pub(crate) fn check_embedding_width(features: usize) -> Result<()> {
    if features < 2 || !features.is_multiple_of(2) {
        return Err(FlowError::Configuration(format!("time embedding width {features} must be even and >= 2")));
    }
    Ok(())
}

pub const LN_EPS: f64 = 1e-6;

/// Parameter-free layer norm; returns the normalized vector and `1 / std`.
pub fn layer_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Backward of [`layer_norm`] given its output `y` and `1 / std`.
pub fn layer_norm_backward(y: &[f64], inv: f64, dy: &[f64], dx: &mut [f64]) {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_y = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((d, &g), &yi) in dx.iter_mut().zip(dy).zip(y) {
        *d += inv * (g - mean_dy - yi * mean_dy_y);
    }
}
