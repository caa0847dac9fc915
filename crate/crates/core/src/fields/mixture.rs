use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::numerics::{RngStream, Tensor};

/// Diagonal Gaussian mixture used as DDIM data distribution.
///
/// Noising with `x_t = sqrt(ᾱ) x_0 + sqrt(1 - ᾱ) ε` keeps it a mixture with means
/// `sqrt(ᾱ) m_k` and variances `ᾱ v_k + 1 - ᾱ`, so the noise prediction
/// `ε̂ = -sqrt(1 - ᾱ) ∇ log q_t(x)` is available in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureScore {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixtureScore {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(FlowError::invalid("mixture needs matching weights, means and variances"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(FlowError::invalid(format!("mixture weights {weights:?} are not a simplex vector")));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) || variances.iter().any(|v| v.len() != d) {
            return Err(FlowError::invalid("mixture components disagree on dimension"));
        }
        if variances.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(FlowError::invalid("mixture variances must be positive"));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn single(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Noise prediction `ε̂(x) = -sqrt(1 - ᾱ) ∇ log q_ᾱ(x)` for each row of `x`.
    pub fn predict_noise(&self, x: &Tensor, alpha_bar: f64) -> Result<Tensor> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(FlowError::Schedule(format!("alpha_bar {alpha_bar} outside (0, 1]")));
        }
        if x.cols() != self.dim() {
            return Err(FlowError::invalid(format!("state dimension {} vs mixture {}", x.cols(), self.dim())));
        }
        let noise_scale = (1.0 - alpha_bar).sqrt();
        let signal = alpha_bar.sqrt();
        let mut out = Tensor::zeros(x.shape());
        let mut logp = vec![0.0; self.weights.len()];
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (k, lp) in logp.iter_mut().enumerate() {
                let mut acc = self.weights[k].ln();
                for (j, &xj) in xi.iter().enumerate() {
                    let var = alpha_bar * self.variances[k][j] + 1.0 - alpha_bar;
                    let diff = xj - signal * self.means[k][j];
                    acc -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                }
                *lp = acc;
            }
            let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(FlowError::numerical(format!("all mixture responsibilities underflow at sample {i}")));
            }
            let z: f64 = logp.iter().map(|l| (l - max).exp()).sum();
            let oi = out.row_mut(i);
            for (k, lp) in logp.iter().enumerate() {
                let r = (lp - max).exp() / z;
                if r == 0.0 {
                    continue;
                }
                for j in 0..xi.len() {
                    let var = alpha_bar * self.variances[k][j] + 1.0 - alpha_bar;
                    let score = -(xi[j] - signal * self.means[k][j]) / var;
                    oi[j] += r * score;
                }
            }
            for v in oi.iter_mut() {
                *v *= -noise_scale;
            }
        }
        Ok(out)
    }

    /// Draws `n` clean samples.
    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (idx, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = idx;
                    break;
                }
            }
            for j in 0..d {
                data.push(self.means[k][j] + self.variances[k][j].sqrt() * rng.normal());
            }
        }
        Tensor::new(vec![n, d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component() -> GaussianMixtureScore {
        GaussianMixtureScore::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
            vec![vec![0.2, 0.3], vec![0.4, 0.1]],
        )
        .unwrap()
    }

    /// Independent log-density of the noised mixture, written out directly.
    fn log_density(f: &GaussianMixtureScore, x: &[f64], ab: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..f.weights.len() {
            let mut dens = f.weights[k];
            for (j, &xj) in x.iter().enumerate() {
                let var = ab * f.variances[k][j] + (1.0 - ab);
                let mean = ab.sqrt() * f.means[k][j];
                dens *= (-(xj - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            total += dens;
        }
        total.ln()
    }

    #[test]
    fn standard_normal_at_mean_is_zero() {
        let f = GaussianMixtureScore::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let e = f.predict_noise(&Tensor::zeros(&[1, 2]), 1.0).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_gaussian_closed_form() {
        // q_t = N(sqrt(ab) m, ab v + 1 - ab): eps = sqrt(1-ab) (x - sqrt(ab) m) / (ab v + 1 - ab)
        let (m, v, ab) = (1.5, 0.25, 0.6);
        let f = GaussianMixtureScore::single(vec![m], vec![v]).unwrap();
        for x in [-2.0, 0.0, 0.3, 4.0] {
            let e = f.predict_noise(&Tensor::row_vector(&[x]).unwrap(), ab).unwrap().data()[0];
            let expected = (1.0 - ab).sqrt() * (x - ab.sqrt() * m) / (ab * v + 1.0 - ab);
            assert!((e - expected).abs() < 1e-14, "{e} vs {expected}");
        }
    }

    #[test]
    fn mixture_matches_finite_difference_score() {
        let f = two_component();
        let ab = 0.45;
        let x = [0.2, 0.1];
        let e = f.predict_noise(&Tensor::row_vector(&x).unwrap(), ab).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[j] += h;
            dn[j] -= h;
            let grad = (log_density(&f, &up, ab) - log_density(&f, &dn, ab)) / (2.0 * h);
            let expected = -(1.0 - ab).sqrt() * grad;
            assert!((e.data()[j] - expected).abs() < 1e-6, "axis {j}: {} vs {expected}", e.data()[j]);
        }
    }

    #[test]
    fn degenerate_weights_reduce_to_single_component() {
        let mix = GaussianMixtureScore::new(
            vec![1.0, 0.0],
            vec![vec![0.5, -0.5], vec![3.0, 3.0]],
            vec![vec![0.3, 0.6], vec![1.0, 1.0]],
        )
        .unwrap();
        let single = GaussianMixtureScore::single(vec![0.5, -0.5], vec![0.3, 0.6]).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-3.0, 2.5], vec![3.0, 3.0]]).unwrap();
        for ab in [0.05, 0.5, 0.99] {
            let a = mix.predict_noise(&x, ab).unwrap();
            let b = single.predict_noise(&x, ab).unwrap();
            assert!(a.sub(&b).unwrap().norm_inf() <= 1e-12);
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(GaussianMixtureScore::new(vec![0.5, 0.6], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(GaussianMixtureScore::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
    }
}
