use flowinv_core::compare::compare_solvers;
use flowinv_core::fields::{AnalyticGaussianFlow, GaussianMixtureScore};
use flowinv_core::numerics::RngStream;
use serde::{Deserialize, Serialize};

use super::positive;
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub mu: Vec<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Rectified-flow side: the analytic Gaussian flow.
    pub flow: FlowSpec,
    /// Diffusion side: a Gaussian mixture with closed-form noise prediction.
    pub mixture: MixtureSpec,
    /// Step count of both solvers.
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_rescaled_residual: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            flow: FlowSpec { mu: vec![2.0, 2.0], s: 0.5 },
            mixture: MixtureSpec {
                weights: vec![0.5, 0.5],
                means: vec![vec![-1.5, 0.0], vec![1.5, 0.5]],
                variances: vec![vec![0.09, 0.09], vec![0.16, 0.16]],
            },
            steps: 50,
            samples: 64,
            seed: 0,
            max_rescaled_residual: 1e-10,
        }
    }
}

impl CommandConfig for CompareConfig {
    fn validate(&self) -> Result<(), CliError> {
        positive("steps", self.steps)?;
        positive("samples", self.samples)?;
        AnalyticGaussianFlow::new(self.flow.mu.clone(), self.flow.s)?;
        self.mixture()?;
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

impl CompareConfig {
    fn mixture(&self) -> Result<GaussianMixtureScore, CliError> {
        let m = &self.mixture;
        Ok(GaussianMixtureScore::new(m.weights.clone(), m.means.clone(), m.variances.clone())?)
    }
}

pub(super) fn compare_ddim(cfg: &CompareConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let field = AnalyticGaussianFlow::new(cfg.flow.mu.clone(), cfg.flow.s)?;
    let curves = compare_solvers(&field, &cfg.mixture()?, cfg.steps, cfg.samples, &RngStream::new(cfg.seed))?;
    curves.write_csv(&mut dir.artifact("comparison.csv")?)?;
    let (euler_trend, ddim_trend) = curves.trends();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let residual = curves.max_rescaled_residual();
    report.metric("steps", cfg.steps as f64, "count");
    report.metric("euler_trend", euler_trend, "spearman");
    report.metric("ddim_trend", ddim_trend, "spearman");
    report.metric("euler_min_mse", min(&curves.euler), "mse");
    report.metric("ddim_min_mse", min(&curves.ddim), "mse");
    report.metric("euler_final_mse", *curves.euler.last().unwrap_or(&f64::NAN), "mse");
    report.metric("ddim_final_mse", *curves.ddim.last().unwrap_or(&f64::NAN), "mse");
    report.metric("max_rescaled_residual", residual, "abs");
    report.check("rescaled_ddim_identity", residual <= cfg.max_rescaled_residual, || {
        format!("residual {residual:e} exceeds {:e}", cfg.max_rescaled_residual)
    });
    Ok(())
}
