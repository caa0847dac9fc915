use serde::{Deserialize, Serialize};

use super::TrainableField;
use crate::error::{FlowError, Result};
use crate::fields::{check_request, VelocityField};
use crate::nn::{check_embedding_width, silu, silu_grad, sinusoidal_embedding, Dense, Layout};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_features: usize,
    pub max_freq: f64,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self { dim: 2, hidden: 64, depth: 2, time_features: 16, max_freq: 100.0 }
    }
}

impl MlpArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(FlowError::Configuration("MLP sizes must be positive".into()));
        }
        check_embedding_width(self.time_features)
    }
}

/// Unconditional velocity MLP on `[x, sinusoidal(σ)]` with SiLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: MlpArch,
    layers: Vec<Dense>,
    params: Vec<f64>,
}

fn build(arch: &MlpArch) -> (Layout, Vec<Dense>) {
    let mut l = Layout::default();
    let mut layers = Vec::with_capacity(arch.depth + 1);
    let mut inp = arch.dim + arch.time_features;
    for k in 0..arch.depth {
        layers.push(l.dense(&format!("hidden.{k}"), arch.hidden, inp, true));
        inp = arch.hidden;
    }
    layers.push(l.dense("out", arch.dim, inp, true));
    (l, layers)
}

impl Mlp {
    pub fn new(arch: MlpArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let (layout, layers) = build(&arch);
        let mut params = vec![0.0; layout.total()];
        let last = layers.len() - 1;
        for (k, layer) in layers.iter().enumerate() {
            layer.init(&mut params, rng, if k == last { 0.1 } else { 1.0 });
        }
        Ok(Self { arch, layers, params })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (layout, layers) = build(&arch);
        if params.len() != layout.total() {
            return Err(FlowError::Configuration(format!(
                "MLP expects {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Configuration("non-finite MLP parameter".into()));
        }
        Ok(Self { arch, layers, params })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    /// Returns the output and every layer input (`acts`) plus pre-activations (`pre`).
    fn forward_one(&self, x: &[f64], sigma: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut input = x.to_vec();
        input.extend(sinusoidal_embedding(sigma, self.arch.time_features, self.arch.max_freq));
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(self.arch.depth);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&self.params, acts.last().expect("input layer"));
            if k == last {
                return (z, acts, pre);
            }
            acts.push(z.iter().map(|&v| silu(v)).collect());
            pre.push(z);
        }
        unreachable!("MLP has an output layer")
    }
}

impl VelocityField for Mlp {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn velocity(&self, x: &Tensor, sigma: f64, _tokens: Option<&[u32]>) -> Result<Tensor> {
        check_request(x, sigma, self.arch.dim)?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let (v, _, _) = self.forward_one(x.row(i), sigma);
            out.row_mut(i).copy_from_slice(&v);
        }
        out.ensure_finite("MLP output")?;
        Ok(out)
    }
}

impl TrainableField for Mlp {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn squared_error_grad(
        &self,
        x: &[f64],
        sigma: f64,
        _tokens: Option<&[u32]>,
        target: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let (v, acts, pre) = self.forward_one(x, sigma);
        let resid: Vec<f64> = v.iter().zip(target).map(|(a, b)| a - b).collect();
        let se = resid.iter().map(|r| r * r).sum();
        let mut delta: Vec<f64> = resid.iter().map(|r| 2.0 * weight * r).collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k == 0 {
                layer.backward(&self.params, &acts[0], &delta, grad, None);
                break;
            }
            let mut da = vec![0.0; layer.inp];
            layer.backward(&self.params, &acts[k], &delta, grad, Some(&mut da));
            delta = da.iter().zip(&pre[k - 1]).map(|(g, z)| g * silu_grad(*z)).collect();
        }
        Ok(se)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn parameter_count() {
        let m = Mlp::new(MlpArch::default(), &mut RngStream::new(0)).unwrap();
        assert_eq!(m.params().len(), 64 * 18 + 64 + 64 * 64 + 64 + 2 * 64 + 2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = MlpArch { hidden: 8, ..MlpArch::default() };
        for seed in 0..3 {
            let mut rng = RngStream::new(seed);
            let m = Mlp::new(arch, &mut rng).unwrap();
            let x = [rng.normal(), rng.normal()];
            let target = [rng.normal(), rng.normal()];
            let sigma = rng.uniform();
            let mut g = vec![0.0; m.params().len()];
            m.squared_error_grad(&x, sigma, None, &target, 1.0, &mut g).unwrap();
            let loss = |q: &[f64]| {
                let probe = Mlp::from_params(arch, q.to_vec()).unwrap();
                let mut scratch = vec![0.0; q.len()];
                probe.squared_error_grad(&x, sigma, None, &target, 1.0, &mut scratch).unwrap()
            };
            let report = finite_diff_check(loss, m.params(), &g, 1e-5).unwrap();
            assert!(report.max_relative_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn wrong_parameter_count_rejected() {
        assert!(Mlp::from_params(MlpArch::default(), vec![0.0; 3]).is_err());
    }
}
