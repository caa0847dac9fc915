//! Naive Euler inversion (rectified flow) against naive DDIM inversion (diffusion):
//! round-trip error after inverting and regenerating the last `k` steps, for every `k`.

use std::io::Write;

use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::fields::{AnalyticGaussianFlow, GaussianMixtureScore, VelocityField};
use crate::inversion::naive_invert_step;
use crate::numerics::{spearman, RngStream, Tensor};
use crate::samplers::{ddim_invert_step, ddim_step, euler_step, rescaled_ddim_check, DiffusionSchedule, TimeGrid};

pub const COMPARISON_HEADER: [&str; 4] = ["k", "euler_round_trip_mse", "ddim_round_trip_mse", "ddim_rescaled_residual"];

/// Round-trip error curves indexed by `k = 1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonCurves {
    pub steps: usize,
    pub euler: Vec<f64>,
    pub ddim: Vec<f64>,
    /// Rescaled first-order identity residual of sampling step `k - 1`.
    pub rescaled_residual: Vec<f64>,
}

impl ComparisonCurves {
    /// Spearman correlation of each curve with `k`: `(euler, ddim)`.
    pub fn trends(&self) -> (f64, f64) {
        let ks: Vec<f64> = (1..=self.steps).map(|k| k as f64).collect();
        (spearman(&ks, &self.euler), spearman(&ks, &self.ddim))
    }

    pub fn max_rescaled_residual(&self) -> f64 {
        self.rescaled_residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(COMPARISON_HEADER)?;
        for k in 0..self.steps {
            w.write_record([
                (k + 1).to_string(),
                self.euler[k].to_string(),
                self.ddim[k].to_string(),
                self.rescaled_residual[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean squared error of inverting the last `k` Euler steps naively from `x1` and
/// integrating back, for `k = 1..=T`.
pub fn euler_round_trip_curve<F: VelocityField + ?Sized>(field: &F, x1: &Tensor, grid: &TimeGrid) -> Result<Vec<f64>> {
    let steps = grid.steps();
    let mut curve = Vec::with_capacity(steps);
    let mut latent = x1.clone();
    for k in 1..=steps {
        let start = steps - k;
        latent = naive_invert_step(field, &latent, start, grid, None)?;
        let mut x = latent.clone();
        for t in start..steps {
            x = euler_step(field, &x, t, grid, None)?;
        }
        curve.push(x.mse(x1)?);
    }
    Ok(curve)
}

/// The DDIM counterpart of [`euler_round_trip_curve`], starting at the `ᾱ = 1` end.
pub fn ddim_round_trip_curve(
    score: &GaussianMixtureScore,
    x_data: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let steps = schedule.steps();
    let mut curve = Vec::with_capacity(steps);
    let mut latent = x_data.clone();
    for k in 1..=steps {
        let start = steps - k;
        latent = ddim_invert_step(score, &latent, start, schedule)?;
        latent.ensure_finite(&format!("ddim inversion step {start}"))?;
        let mut x = latent.clone();
        for t in start..steps {
            x = ddim_step(score, &x, t, schedule)?;
        }
        curve.push(x.mse(x_data)?);
    }
    Ok(curve)
}

/// Rescaled-identity residual at every step of a DDIM sampling pass from `x_noise`.
pub fn ddim_rescaled_residuals(
    score: &GaussianMixtureScore,
    x_noise: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let mut x = x_noise.clone();
    let mut out = Vec::with_capacity(schedule.steps());
    for t in 0..schedule.steps() {
        out.push(rescaled_ddim_check(score, &x, t, schedule)?);
        x = ddim_step(score, &x, t, schedule)?;
    }
    Ok(out)
}

/// Both curves on `samples` points with the same step count `steps` on each side.
/// Euler inputs are drawn from the analytic field's target, DDIM inputs from the mixture.
pub fn compare_solvers(
    field: &AnalyticGaussianFlow,
    score: &GaussianMixtureScore,
    steps: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<ComparisonCurves> {
    if samples == 0 {
        return Err(FlowError::invalid("comparison needs at least one sample"));
    }
    let grid = TimeGrid::uniform(steps)?;
    let schedule = DiffusionSchedule::cosine(steps)?;
    let x1 = field.sample_target(&mut rng.substream(0), samples)?;
    let x_data = score.sample(&mut rng.substream(1), samples)?;
    let noise = rng.substream(2).gaussian(&[samples, score.dim()])?;
    Ok(ComparisonCurves {
        steps,
        euler: euler_round_trip_curve(field, &x1, &grid)?,
        ddim: ddim_round_trip_curve(score, &x_data, &schedule)?,
        rescaled_residual: ddim_rescaled_residuals(score, &noise, &schedule)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ConstantCouplingField, ZeroField};

    #[test]
    fn exact_fields_give_zero_curves() {
        let grid = TimeGrid::uniform(5).unwrap();
        let x1 = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        assert!(euler_round_trip_curve(&ZeroField(2), &x1, &grid).unwrap().iter().all(|&e| e == 0.0));
        let coupling = ConstantCouplingField::new(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), x1.clone()).unwrap();
        assert!(euler_round_trip_curve(&coupling, &x1, &grid).unwrap().iter().all(|&e| e < 1e-28));
    }

    #[test]
    fn one_step_round_trip_by_hand() {
        // v = 2x: the naive inverse step gives (1 - 2Δ) x1, the forward step (1 + 2Δ)(1 - 2Δ) x1
        let field = crate::fields::LinearField::constant(1, vec![0.0, 1.0], vec![2.0], vec![0.0]).unwrap();
        let grid = TimeGrid::uniform(4).unwrap();
        let x1 = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let curve = euler_round_trip_curve(&field, &x1, &grid).unwrap();
        let err = 3.0 * (1.0 - (1.0 - 0.5) * (1.0 + 0.5));
        assert!((curve[0] - err * err).abs() < 1e-14);
    }

    #[test]
    fn curves_trend_upwards() {
        let field = AnalyticGaussianFlow::new(vec![2.0, 2.0], 0.5).unwrap();
        let score = GaussianMixtureScore::new(
            vec![0.5, 0.5],
            vec![vec![-1.5, 0.0], vec![1.5, 0.5]],
            vec![vec![0.09; 2], vec![0.16; 2]],
        )
        .unwrap();
        let curves = compare_solvers(&field, &score, 20, 64, &RngStream::new(1)).unwrap();
        let (e, d) = curves.trends();
        assert!(e >= 0.9 && d >= 0.9, "trends {e} {d}");
        assert!(curves.euler.iter().chain(&curves.ddim).all(|&v| v > 0.0));
        assert!(curves.max_rescaled_residual() <= 1e-10);
        let mut buf = Vec::new();
        curves.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), COMPARISON_HEADER.join(","));
        assert_eq!(text.lines().count(), 21);
    }
}
