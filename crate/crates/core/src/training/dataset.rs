use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::GaussianMixtureScore;
use crate::numerics::{RngStream, Tensor};

pub const NULL_TOKEN: u32 = 0;
/// Token ids of the two-factor prompts: `[A_a, B_b]`.
pub const TOKEN_A: [u32; 2] = [1, 2];
pub const TOKEN_B: [u32; 2] = [3, 4];
pub const VOCAB: usize = 5;

/// Prompt selecting mean `a` for the first factor and mean `b` for the second.
pub fn two_factor_prompt(a: usize, b: usize) -> Vec<u32> {
    vec![TOKEN_A[a], TOKEN_B[b]]
}

/// Index of the nearest of two 2-D means.
pub fn nearest_mean(x: &[f64], means: &[[f64; 2]; 2]) -> usize {
    let d = |m: &[f64; 2]| (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
    usize::from(d(&means[1]) < d(&means[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic `N(mean, std² I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Weighted isotropic 2-D Gaussian mixture.
    Gmm2d { weights: Vec<f64>, means: Vec<[f64; 2]>, stds: Vec<f64> },
    /// `x = (x_A, x_B)` with `x_A ~ N(means_a[a], std²)` and `x_B ~ N(means_b[b], std²)`,
    /// prompt `[A_a, B_b]`, `a` and `b` uniform.
    TwoFactor { means_a: [[f64; 2]; 2], means_b: [[f64; 2]; 2], std: f64 },
}

impl DatasetSpec {
    pub fn gaussian_2d() -> Self {
        DatasetSpec::Gaussian { mean: vec![2.0, 2.0], std: 0.5 }
    }

    pub fn two_factor() -> Self {
        DatasetSpec::TwoFactor { means_a: [[-1.0, -1.0], [1.0, 1.0]], means_b: [[-1.0, 1.0], [1.0, -1.0]], std: 0.1 }
    }

    pub fn gmm2d() -> Self {
        DatasetSpec::Gmm2d { weights: vec![0.5, 0.5], means: vec![[-1.5, 0.0], [1.5, 0.5]], stds: vec![0.3, 0.4] }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gaussian { mean, .. } => mean.len(),
            DatasetSpec::Gmm2d { .. } => 2,
            DatasetSpec::TwoFactor { .. } => 4,
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, DatasetSpec::TwoFactor { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::InvalidArgument(m));
        match self {
            DatasetSpec::Gaussian { mean, std } => {
                if mean.is_empty() || !(*std > 0.0) || mean.iter().any(|m| !m.is_finite()) {
                    return bad(format!("gaussian dataset needs a finite mean and positive std, got {mean:?}, {std}"));
                }
            }
            DatasetSpec::Gmm2d { weights, means, stds } => {
                if weights.is_empty() || means.len() != weights.len() || stds.len() != weights.len() {
                    return bad("gmm2d needs matching weights, means and stds".into());
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return bad(format!("gmm2d weights {weights:?} are not a simplex vector"));
                }
                if stds.iter().any(|s| !(*s > 0.0)) {
                    return bad("gmm2d stds must be positive".into());
                }
            }
            DatasetSpec::TwoFactor { std, .. } => {
                if !(*std > 0.0) {
                    return bad(format!("two_factor std must be positive, got {std}"));
                }
            }
        }
        Ok(())
    }

    /// Closed-form noise predictor of the data distribution, where one exists.
    pub fn mixture(&self) -> Option<GaussianMixtureScore> {
        match self {
            DatasetSpec::Gaussian { mean, std } => {
                GaussianMixtureScore::single(mean.clone(), vec![std * std; mean.len()]).ok()
            }
            DatasetSpec::Gmm2d { weights, means, stds } => GaussianMixtureScore::new(
                weights.clone(),
                means.iter().map(|m| m.to_vec()).collect(),
                stds.iter().map(|s| vec![s * s; 2]).collect(),
            )
            .ok(),
            DatasetSpec::TwoFactor { .. } => None,
        }
    }
}

/// Samples plus, for conditional datasets, one prompt per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub prompts: Option<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    rng: RngStream,
}

pub fn make_dataset(spec: DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    Ok(SyntheticDataset { spec, rng: RngStream::new(seed) })
}

impl SyntheticDataset {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn sample(&mut self, n: usize) -> Result<Samples> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut prompts = self.spec.is_conditional().then(|| Vec::with_capacity(n));
        for _ in 0..n {
            match &self.spec {
                DatasetSpec::Gaussian { mean, std } => {
                    data.extend(mean.iter().map(|m| m + std * self.rng.normal()));
                }
                DatasetSpec::Gmm2d { weights, means, stds } => {
                    let k = pick(weights, self.rng.uniform());
                    data.push(means[k][0] + stds[k] * self.rng.normal());
                    data.push(means[k][1] + stds[k] * self.rng.normal());
                }
                DatasetSpec::TwoFactor { means_a, means_b, std } => {
                    let a = self.rng.below(2);
                    let b = self.rng.below(2);
                    for m in means_a[a].iter().chain(&means_b[b]) {
                        data.push(m + std * self.rng.normal());
                    }
                    if let Some(p) = prompts.as_mut() {
                        p.push(two_factor_prompt(a, b));
                    }
                }
            }
        }
        Ok(Samples { x: Tensor::new(vec![n, d], data)?, prompts })
    }

    /// Two-factor samples for a fixed prompt.
    pub fn sample_prompt(&mut self, prompt: &[u32], n: usize) -> Result<Tensor> {
        let DatasetSpec::TwoFactor { means_a, means_b, std } = &self.spec else {
            return Err(FlowError::Capability("only the two_factor dataset is prompt-conditional".into()));
        };
        let (a, b) = decode_prompt(prompt)?;
        let mut data = Vec::with_capacity(4 * n);
        for _ in 0..n {
            for m in means_a[a].iter().chain(&means_b[b]) {
                data.push(m + std * self.rng.normal());
            }
        }
        Tensor::new(vec![n, 4], data)
    }
}

/// `(a, b)` factor indices of a two-factor prompt.
pub fn decode_prompt(prompt: &[u32]) -> Result<(usize, usize)> {
    let find = |set: &[u32; 2], tok: u32| set.iter().position(|&t| t == tok);
    match prompt {
        [ta, tb] => match (find(&TOKEN_A, *ta), find(&TOKEN_B, *tb)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(FlowError::invalid(format!("{prompt:?} is not a two-factor prompt"))),
        },
        _ => Err(FlowError::invalid(format!("two-factor prompts have 2 tokens, got {}", prompt.len()))),
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_sample_mean() {
        let mut ds = make_dataset(DatasetSpec::Gaussian { mean: vec![0.0], std: 1.0 }, 3).unwrap();
        let s = ds.sample(100_000).unwrap();
        assert!(s.x.mean().abs() <= 0.02);
        assert!(s.prompts.is_none());
    }

    #[test]
    fn two_factor_within_six_sigma() {
        let mut ds = make_dataset(DatasetSpec::two_factor(), 4).unwrap();
        let x = ds.sample_prompt(&two_factor_prompt(0, 0), 10_000).unwrap();
        for row in x.row_iter() {
            let centre = [-1.0, -1.0, -1.0, 1.0];
            assert!(row.iter().zip(centre).all(|(v, c)| (v - c).abs() <= 6.0 * 0.1));
        }
    }

    #[test]
    fn two_factor_prompts_match_samples() {
        let mut ds = make_dataset(DatasetSpec::two_factor(), 5).unwrap();
        let s = ds.sample(500).unwrap();
        let DatasetSpec::TwoFactor { means_a, means_b, .. } = DatasetSpec::two_factor() else { unreachable!() };
        for (row, p) in s.x.row_iter().zip(s.prompts.unwrap()) {
            let (a, b) = decode_prompt(&p).unwrap();
            assert_eq!(nearest_mean(&row[..2], &means_a), a);
            assert_eq!(nearest_mean(&row[2..], &means_b), b);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = make_dataset(DatasetSpec::gmm2d(), 9).unwrap();
        let mut b = make_dataset(DatasetSpec::gmm2d(), 9).unwrap();
        assert_eq!(a.sample(64).unwrap(), b.sample(64).unwrap());
    }

    #[test]
    fn invalid_weights_rejected() {
        let spec = DatasetSpec::Gmm2d { weights: vec![0.7, 0.7], means: vec![[0.0, 0.0]; 2], stds: vec![1.0; 2] };
        assert!(matches!(make_dataset(spec, 0).unwrap_err(), FlowError::InvalidArgument(_)));
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let spec = DatasetSpec::two_factor();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<DatasetSpec>(&text).unwrap(), spec);
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"kind":"gaussian","mean":[0],"std":1,"extra":1}"#).is_err());
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"kind":"spiral"}"#).is_err());
    }
}
