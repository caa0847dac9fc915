use serde::{Deserialize, Serialize};

use super::{check_request, VelocityField};
use crate::error::{FlowError, Result};
use crate::numerics::{RngStream, Tensor};

/// Affine field `v(x, σ) = A(σ) x + b(σ)` with coefficients tabulated at `nodes`.
///
/// Between nodes the coefficients are interpolated linearly; at a node they are used
/// verbatim, which is all the exact-inverse oracle needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearField {
    pub dim: usize,
    pub nodes: Vec<f64>,
    /// One row-major `dim × dim` matrix per node.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl LinearField {
    pub fn new(dim: usize, nodes: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let cfg = |m: String| FlowError::Configuration(m);
        if dim == 0 || nodes.is_empty() {
            return Err(cfg("linear field needs a positive dimension and at least one node".into()));
        }
        if a.len() != nodes.len() || b.len() != nodes.len() {
            return Err(cfg(format!("{} nodes but {} matrices and {} offsets", nodes.len(), a.len(), b.len())));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(cfg("linear field nodes must be strictly increasing".into()));
        }
        for (k, (m, o)) in a.iter().zip(&b).enumerate() {
            if m.len() != dim * dim || o.len() != dim {
                return Err(cfg(format!("coefficients at node {k} have the wrong size")));
            }
            if m.iter().chain(o).any(|v| !v.is_finite()) {
                return Err(cfg(format!("non-finite coefficient at node {k}")));
            }
        }
        Ok(Self { dim, nodes, a, b })
    }

    /// Same `A`, `b` at every node.
    pub fn constant(dim: usize, nodes: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let n = nodes.len();
        Self::new(dim, nodes, vec![a; n], vec![b; n])
    }

    /// Constant field with Gaussian `A` rescaled so that `max Δσ · ||A||₂ = q` over the
    /// steps of `nodes`, which makes every fixed-point inverse step a `q`-contraction.
    pub fn random_contraction(dim: usize, nodes: Vec<f64>, q: f64, rng: &mut RngStream) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(FlowError::invalid(format!("contraction factor {q} outside (0, 1)")));
        }
        let h = nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        if !(h > 0.0) {
            return Err(FlowError::Configuration("contraction field needs at least two nodes".into()));
        }
        let raw: Vec<f64> = (0..dim * dim).map(|_| rng.normal()).collect();
        let norm = nalgebra::DMatrix::from_row_slice(dim, dim, &raw).singular_values().max();
        if !(norm > 0.0) {
            return Err(FlowError::numerical("degenerate random matrix"));
        }
        let a = raw.iter().map(|v| v * q / (h * norm)).collect();
        let b = (0..dim).map(|_| 0.5 * rng.normal()).collect();
        Self::constant(dim, nodes, a, b)
    }

    /// `(A(σ), b(σ))`, exact at nodes, linearly interpolated between them.
    pub fn coefficients(&self, sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let last = self.nodes.len() - 1;
        if let Some(k) = self.nodes.iter().position(|&s| s == sigma) {
            return Ok((self.a[k].clone(), self.b[k].clone()));
        }
        if sigma < self.nodes[0] || sigma > self.nodes[last] {
            return Err(FlowError::Configuration(format!(
                "no coefficients for sigma {sigma}; table covers [{}, {}]",
                self.nodes[0], self.nodes[last]
            )));
        }
        let k = self.nodes.partition_point(|&s| s < sigma);
        let (lo, hi) = (self.nodes[k - 1], self.nodes[k]);
        let w = (sigma - lo) / (hi - lo);
        let lerp = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| (1.0 - w) * u + w * v).collect();
        Ok((lerp(&self.a[k - 1], &self.a[k]), lerp(&self.b[k - 1], &self.b[k])))
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, sigma: f64, _tokens: Option<&[u32]>) -> Result<Tensor> {
        check_request(x, sigma, self.dim)?;
        let (a, b) = self.coefficients(sigma)?;
        let d = self.dim;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for r in 0..d {
                oi[r] = a[r * d..(r + 1) * d].iter().zip(xi).map(|(p, q)| p * q).sum::<f64>() + b[r];
            }
        }
        Ok(out)
    }
}
