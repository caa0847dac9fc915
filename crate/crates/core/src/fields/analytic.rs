use serde::{Deserialize, Serialize};

use super::{check_request, VelocityField};
use crate::error::{FlowError, Result};
use crate::numerics::{RngStream, Tensor};

/// Marginal rectified-flow velocity between `N(0, I)` and `N(mu, s² I)`.
///
/// Per axis, `(x0, x1, x_σ)` with `x_σ = σ x1 + (1 - σ) x0` are jointly Gaussian, so
/// `E[x1 - x0 | x_σ = x] = mu + c(σ) (x - σ mu)` where
///
/// ```text
/// c(σ) = Cov(x1 - x0, x_σ) / Var(x_σ) = (σ s² - (1 - σ)) / (σ² s² + (1 - σ)²).
/// ```
///
/// The induced flow map is `x(σ) = σ mu + std(σ) x0` with `std(σ)² = σ² s² + (1 - σ)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussianFlow {
    pub mu: Vec<f64>,
    pub s: f64,
}

impl AnalyticGaussianFlow {
    pub fn new(mu: Vec<f64>, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(FlowError::invalid(format!("target std must be positive, got {s}")));
        }
        if mu.is_empty() || mu.iter().any(|m| !m.is_finite()) {
            return Err(FlowError::invalid("target mean must be a nonempty finite vector"));
        }
        Ok(Self { mu, s })
    }

    pub fn coefficient(&self, sigma: f64) -> f64 {
        let s2 = self.s * self.s;
        let one_minus = 1.0 - sigma;
        (sigma * s2 - one_minus) / (sigma * sigma * s2 + one_minus * one_minus)
    }

    pub fn marginal_std(&self, sigma: f64) -> f64 {
        (sigma * sigma * self.s * self.s + (1.0 - sigma) * (1.0 - sigma)).sqrt()
    }

    /// `n` draws from the target `N(mu, s² I)`.
    pub fn sample_target(&self, rng: &mut RngStream, n: usize) -> Result<Tensor> {
        let mut x = rng.gaussian(&[n, self.mu.len()])?.scale(self.s);
        for i in 0..n {
            for (v, m) in x.row_mut(i).iter_mut().zip(&self.mu) {
                *v += m;
            }
        }
        Ok(x)
    }

    /// Exact solution of the flow ODE from the noise end: `x(σ) = σ mu + std(σ) x0`.
    pub fn exact_flow(&self, x0: &Tensor, sigma: f64) -> Result<Tensor> {
        check_request(x0, 0.0, self.mu.len())?;
        let sd = self.marginal_std(sigma);
        let mut out = x0.clone();
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mu) {
                *v = sigma * m + sd * *v;
            }
        }
        Ok(out)
    }
}

impl VelocityField for AnalyticGaussianFlow {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn velocity(&self, x: &Tensor, sigma: f64, _tokens: Option<&[u32]>) -> Result<Tensor> {
        check_request(x, sigma, self.mu.len())?;
        let c = self.coefficient(sigma);
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mu) {
                *v = m + c * (*v - sigma * m);
            }
        }
        Ok(out)
    }
}
