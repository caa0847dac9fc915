//! Two-stage inversion of the Euler sampler.
//!
//! Walking the grid backwards from the data end, the exact Euler preimage of `x_{t+1}`
//! solves `x_t = x_{t+1} + (σ_t - σ_{t+1}) v(x_t, σ_t)`. The naive inversion evaluates
//! the velocity at `x_{t+1}` instead. Stage I refines that guess by fixed-point
//! iteration (`x^0 = x_{t+1}`, `x^i = x_{t+1} + Δσ v(x^{i-1}, σ_t)`), aggregating the
//! iterates. Stage II records per-step compensations `ε_t = x_{t+1} - (x_t + Δσ v(x_t, σ_t))`
//! so that a compensated replay reproduces the stored trajectory.
//!
//! With `I = 0` iterations the step is the naive one; `I = 1` produces the same single
//! iterate, so the two coincide under either aggregation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::{AnalyticGaussianFlow, Condition, LinearField, VelocityField};
use crate::numerics::{median, RngStream, Tensor};
use crate::samplers::{guided_velocity, TimeGrid, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the iterates `x^1..x^I`.
    Average,
    /// Final iterate `x^I`.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub iterations: usize,
    pub aggregation: Aggregation,
    /// Relaxation `x^i = x^{i-1} + λ (G(x^{i-1}) - x^{i-1})`; 1 is the plain iteration.
    pub damping: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { iterations: 3, aggregation: Aggregation::Average, damping: 1.0 }
    }
}

impl FixedPointConfig {
    pub fn new(iterations: usize, aggregation: Aggregation) -> Self {
        Self { iterations, aggregation, damping: 1.0 }
    }

    pub fn naive() -> Self {
        Self::new(0, Aggregation::Average)
    }

    fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(FlowError::invalid(format!("damping {} outside (0, 1]", self.damping)));
        }
        Ok(())
    }
}

/// Per-step iteration record of one inversion step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    /// `||x^i - x^{i-1}||` for `i = 1..I`.
    pub iterate_distances: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InversionDiagnostics {
    /// Indexed by grid step `t` (the step producing `x_t`).
    pub steps: Vec<StepDiagnostics>,
    /// `||v(x_{t+1}, σ_t) - v(x_t, σ_t)||`, the gap the naive step ignores.
    pub velocity_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// States stored noise end first; `states[T]` is the inverted input.
    pub trajectory: Trajectory,
    /// `ε_t` for the step `t -> t + 1`; empty until Stage II has run.
    pub compensations: Vec<Tensor>,
    pub diagnostics: InversionDiagnostics,
}

impl InversionResult {
    pub fn noise_latent(&self) -> &Tensor {
        self.trajectory.noise_end()
    }

    pub fn has_compensations(&self) -> bool {
        self.compensations.len() == self.trajectory.grid.steps()
    }
}

/// `x_{t+1} + (σ_t - σ_{t+1}) v(x_{t+1}, σ_t)`.
pub fn naive_invert_step<F: VelocityField + ?Sized>(
    field: &F,
    x_next: &Tensor,
    t: usize,
    grid: &TimeGrid,
    cond: Option<&Condition>,
) -> Result<Tensor> {
    grid.check_step(t)?;
    let v = guided_velocity(field, x_next, grid.sigma(t), cond)?;
    x_next.axpy(grid.sigma(t) - grid.sigma(t + 1), &v)
}

/// Stage I step: fixed-point refinement of the Euler preimage of `x_next`.
pub fn fixed_point_invert_step<F: VelocityField + ?Sized>(
    field: &F,
    x_next: &Tensor,
    t: usize,
    grid: &TimeGrid,
    cond: Option<&Condition>,
    cfg: &FixedPointConfig,
) -> Result<(Tensor, StepDiagnostics)> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok((naive_invert_step(field, x_next, t, grid, cond)?, StepDiagnostics::default()));
    }
    grid.check_step(t)?;
    let h = grid.sigma(t) - grid.sigma(t + 1);
    let limit = 1e6 * x_next.norm_l2().max(1.0);
    let mut prev = x_next.clone();
    let mut mean: Option<Tensor> = None;
    let mut distances = Vec::with_capacity(cfg.iterations);
    for i in 1..=cfg.iterations {
        let v = guided_velocity(field, &prev, grid.sigma(t), cond)?;
        let mapped = x_next.axpy(h, &v)?;
        let iterate = if cfg.damping == 1.0 { mapped } else { prev.axpy(cfg.damping, &mapped.sub(&prev)?)? };
        let norm = iterate.norm_l2();
        if !norm.is_finite() || norm > limit {
            return Err(FlowError::Divergence { step: t, iteration: i });
        }
        distances.push(iterate.sub(&prev)?.norm_l2());
        // running mean keeps coinciding iterates bitwise equal to their average
        mean = Some(match mean {
            None => iterate.clone(),
            Some(m) => {
                let delta = iterate.sub(&m)?;
                m.axpy(1.0 / i as f64, &delta)?
            }
        });
        prev = iterate;
    }
    let out = match cfg.aggregation {
        Aggregation::Average => mean.expect("at least one iterate"),
        Aggregation::Last => prev,
    };
    Ok((out, StepDiagnostics { iterate_distances: distances }))
}

/// Exact Euler preimage for an affine field:
/// `x_t = (I - Δσ A(σ_t))^{-1} (x_{t+1} + Δσ b(σ_t))` with `Δσ = σ_t - σ_{t+1}`.
pub fn exact_linear_invert_step(field: &LinearField, x_next: &Tensor, t: usize, grid: &TimeGrid) -> Result<Tensor> {
    grid.check_step(t)?;
    let d = field.dim;
    if x_next.cols() != d {
        return Err(FlowError::invalid(format!("state dimension {} vs field {d}", x_next.cols())));
    }
    let h = grid.sigma(t) - grid.sigma(t + 1);
    let (a, b) = field.coefficients(grid.sigma(t))?;
    let system = DMatrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 } - h * a[r * d + c]);
    let lu = system.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() < 1e-14 {
        return Err(FlowError::Singular(format!("I - Δσ A is singular at step {t} (det {det:e})")));
    }
    let mut out = Tensor::zeros(x_next.shape());
    for i in 0..x_next.rows() {
        let rhs = DVector::from_iterator(d, x_next.row(i).iter().zip(&b).map(|(x, bb)| x + h * bb));
        let sol = lu.solve(&rhs).ok_or_else(|| FlowError::Singular(format!("linear solve failed at step {t}")))?;
        out.row_mut(i).copy_from_slice(sol.as_slice());
    }
    Ok(out)
}

/// Chains [`exact_linear_invert_step`] from the data end to the noise end.
pub fn exact_linear_invert(field: &LinearField, x1: &Tensor, grid: &TimeGrid) -> Result<Tensor> {
    let mut x = x1.clone();
    for t in (0..grid.steps()).rev() {
        x = exact_linear_invert_step(field, &x, t, grid)?;
    }
    Ok(x)
}

/// Stage I over the whole grid, from the data end to the noise end.
pub fn invert<F: VelocityField + ?Sized>(
    field: &F,
    x1: &Tensor,
    grid: &TimeGrid,
    cond: Option<&Condition>,
    cfg: &FixedPointConfig,
) -> Result<InversionResult> {
    x1.ensure_finite("inversion input")?;
    let steps = grid.steps();
    let mut states = vec![Tensor::zeros(x1.shape()); steps + 1];
    states[steps] = x1.clone();
    let mut diag =
        InversionDiagnostics { steps: vec![StepDiagnostics::default(); steps], velocity_gaps: vec![0.0; steps] };
    for t in (0..steps).rev() {
        let (x_t, step_diag) = fixed_point_invert_step(field, &states[t + 1], t, grid, cond, cfg)?;
        x_t.ensure_finite(&format!("inversion step {t}"))?;
        let v_next = guided_velocity(field, &states[t + 1], grid.sigma(t), cond)?;
        let v_here = guided_velocity(field, &x_t, grid.sigma(t), cond)?;
        diag.velocity_gaps[t] = v_next.sub(&v_here)?.norm_l2();
        diag.steps[t] = step_diag;
        states[t] = x_t;
    }
    Ok(InversionResult {
        trajectory: Trajectory { grid: grid.clone(), states, condition: cond.cloned() },
        compensations: Vec::new(),
        diagnostics: diag,
    })
}

/// Stage II: `ε_t = x_{t+1} - (x_t + (σ_{t+1} - σ_t) v(x_t, σ_t))` for every step.
pub fn compute_compensations<F: VelocityField + ?Sized>(
    field: &F,
    inv: &InversionResult,
    cond: Option<&Condition>,
) -> Result<InversionResult> {
    let grid = &inv.trajectory.grid;
    let states = &inv.trajectory.states;
    if states.len() != grid.steps() + 1 {
        return Err(FlowError::State(format!("trajectory has {} states for {} steps", states.len(), grid.steps())));
    }
    let mut compensations = Vec::with_capacity(grid.steps());
    for t in 0..grid.steps() {
        let predicted = predict_next(field, &states[t], t, grid, cond)?;
        compensations.push(states[t + 1].sub(&predicted)?);
    }
    Ok(InversionResult { compensations, ..inv.clone() })
}

fn predict_next<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    t: usize,
    grid: &TimeGrid,
    cond: Option<&Condition>,
) -> Result<Tensor> {
    let v = guided_velocity(field, x, grid.sigma(t), cond)?;
    x.axpy(grid.sigma(t + 1) - grid.sigma(t), &v)
}

/// Replays the Euler sampler from the inverted noise latent under `cond`, adding `ε_t`
/// after each step when `apply_compensation` is set.
pub fn regenerate<F: VelocityField + ?Sized>(
    field: &F,
    inv: &InversionResult,
    cond: Option<&Condition>,
    apply_compensation: bool,
) -> Result<Trajectory> {
    if apply_compensation && !inv.has_compensations() {
        return Err(FlowError::State("compensations requested but Stage II has not run".into()));
    }
    let grid = &inv.trajectory.grid;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(inv.noise_latent().clone());
    for t in 0..grid.steps() {
        let mut next = predict_next(field, &states[t], t, grid, cond)?;
        if apply_compensation {
            next = next.add(&inv.compensations[t])?;
        }
        next.ensure_finite(&format!("regeneration step {t}"))?;
        states.push(next);
    }
    Ok(Trajectory { grid: grid.clone(), states, condition: cond.cloned() })
}

/// One row of the naive / fixed-point / compensated reconstruction comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTripRow {
    pub iterations: usize,
    pub aggregation: Aggregation,
    /// Mean squared per-sample error of the uncompensated round trip.
    pub recon_mse: f64,
    /// `||out - x1||_∞ / ||x1||_∞` of the compensated round trip.
    pub compensated_rel_err: f64,
    pub max_compensation_norm: f64,
    pub mean_compensation_norm: f64,
    pub velocity_gap_mean: f64,
    pub velocity_gap_max: f64,
}

pub fn round_trip_report<F: VelocityField + ?Sized>(
    field: &F,
    x1: &Tensor,
    grid: &TimeGrid,
    cond: Option<&Condition>,
    cfgs: &[FixedPointConfig],
) -> Result<Vec<RoundTripRow>> {
    cfgs.iter()
        .map(|cfg| {
            let inv = compute_compensations(field, &invert(field, x1, grid, cond, cfg)?, cond)?;
            let plain = regenerate(field, &inv, cond, false)?;
            let comp = regenerate(field, &inv, cond, true)?;
            let eps_norms: Vec<f64> = inv.compensations.iter().map(Tensor::max_row_norm).collect();
            let gaps = &inv.diagnostics.velocity_gaps;
            Ok(RoundTripRow {
                iterations: cfg.iterations,
                aggregation: cfg.aggregation,
                recon_mse: plain.data_end().mse(x1)?,
                compensated_rel_err: relative_linf(comp.data_end(), x1)?,
                max_compensation_norm: eps_norms.iter().copied().fold(0.0, f64::max),
                mean_compensation_norm: inv.compensations.iter().map(Tensor::mean_row_norm).sum::<f64>()
                    / inv.compensations.len() as f64,
                velocity_gap_mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
                velocity_gap_max: gaps.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Per-configuration medians of [`RoundTripRow`] metrics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub iterations: usize,
    pub aggregation: Aggregation,
    pub median_recon_mse: f64,
    pub max_compensated_rel_err: f64,
    pub median_mean_compensation_norm: f64,
    pub median_velocity_gap: f64,
}

/// Round trips on `seeds` independent batches of `samples` target draws; seed `k`
/// draws from substream `k` of `root`.
pub fn iteration_sweep(
    field: &AnalyticGaussianFlow,
    grid: &TimeGrid,
    cfgs: &[FixedPointConfig],
    seeds: usize,
    samples: usize,
    root: &RngStream,
) -> Result<Vec<SweepRow>> {
    if seeds == 0 || samples == 0 {
        return Err(FlowError::invalid("sweep needs at least one seed and one sample"));
    }
    let mut per_cfg: Vec<Vec<RoundTripRow>> = vec![Vec::with_capacity(seeds); cfgs.len()];
    for seed in 0..seeds {
        let x1 = field.sample_target(&mut root.substream(seed as u64), samples)?;
        for (k, row) in round_trip_report(field, &x1, grid, None, cfgs)?.into_iter().enumerate() {
            per_cfg[k].push(row);
        }
    }
    Ok(cfgs
        .iter()
        .zip(&per_cfg)
        .map(|(cfg, rows)| {
            let col = |f: fn(&RoundTripRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
            SweepRow {
                iterations: cfg.iterations,
                aggregation: cfg.aggregation,
                median_recon_mse: median(&col(|r| r.recon_mse)),
                max_compensated_rel_err: col(|r| r.compensated_rel_err).into_iter().fold(0.0, f64::max),
                median_mean_compensation_norm: median(&col(|r| r.mean_compensation_norm)),
                median_velocity_gap: median(&col(|r| r.velocity_gap_mean)),
            }
        })
        .collect())
}

/// `||a - b||_∞ / ||b||_∞` (absolute when `b` is zero).
pub fn relative_linf(a: &Tensor, b: &Tensor) -> Result<f64> {
    let err = a.sub(b)?.norm_inf();
    let scale = b.norm_inf();
    Ok(if scale > 0.0 { err / scale } else { err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticGaussianFlow, ConstantCouplingField};
    use crate::numerics::gaussian_sample;
    use crate::samplers::{euler_step, sample_ode};

    fn rotation_field(scale: f64, nodes: &[f64]) -> LinearField {
        // A = scale * [[-0.5, 1], [-1, -0.5]], b = (0.3, -0.2)
        LinearField::constant(2, nodes.to_vec(), vec![-0.5 * scale, scale, -scale, -0.5 * scale], vec![0.3, -0.2])
            .unwrap()
    }

    fn coupling() -> (ConstantCouplingField, Tensor, Tensor) {
        let x0 = Tensor::from_rows(&[vec![0.1, -0.3], vec![1.0, 2.0]]).unwrap();
        let x1 = Tensor::from_rows(&[vec![2.0, 1.5], vec![-1.0, 0.5]]).unwrap();
        (ConstantCouplingField::new(x0.clone(), x1.clone()).unwrap(), x0, x1)
    }

    #[test]
    fn naive_inverts_constant_field_exactly() {
        let (f, _, _) = coupling();
        let grid = TimeGrid::uniform(10).unwrap();
        let x = Tensor::from_rows(&[vec![0.4, 0.2], vec![-0.7, 1.1]]).unwrap();
        let fwd = euler_step(&f, &x, 3, &grid, None).unwrap();
        let back = naive_invert_step(&f, &fwd, 3, &grid, None).unwrap();
        assert!(back.sub(&x).unwrap().norm_inf() < 1e-15);
    }

    #[test]
    fn zero_iterations_is_naive_bitwise() {
        let f = AnalyticGaussianFlow::new(vec![2.0, 2.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let x = gaussian_sample(&mut RngStream::new(1), &[5, 2]).unwrap();
        for t in [0, 14, 29] {
            let naive = naive_invert_step(&f, &x, t, &grid, None).unwrap();
            for agg in [Aggregation::Average, Aggregation::Last] {
                let (fp, diag) =
                    fixed_point_invert_step(&f, &x, t, &grid, None, &FixedPointConfig::new(0, agg)).unwrap();
                assert_eq!(fp, naive);
                assert!(diag.iterate_distances.is_empty());
            }
        }
    }

    #[test]
    fn constant_field_iterates_coincide() {
        let (f, _, _) = coupling();
        let grid = TimeGrid::uniform(8).unwrap();
        let x = Tensor::from_rows(&[vec![0.4, 0.2], vec![-0.7, 1.1]]).unwrap();
        let naive = naive_invert_step(&f, &x, 5, &grid, None).unwrap();
        for iters in [1, 2, 5] {
            let (fp, _) =
                fixed_point_invert_step(&f, &x, 5, &grid, None, &FixedPointConfig::new(iters, Aggregation::Average))
                    .unwrap();
            assert_eq!(fp, naive);
        }
    }

    #[test]
    fn exact_linear_step_round_trips() {
        let f = rotation_field(3.0, TimeGrid::uniform(10).unwrap().sigmas());
        let grid = TimeGrid::uniform(10).unwrap();
        let x_next = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        for t in 0..10 {
            let x_t = exact_linear_invert_step(&f, &x_next, t, &grid).unwrap();
            let fwd = euler_step(&f, &x_t, t, &grid, None).unwrap();
            assert!(fwd.sub(&x_next).unwrap().norm_inf() <= 1e-10);
        }
    }

    #[test]
    fn exact_linear_step_zero_matrix() {
        let grid = TimeGrid::uniform(4).unwrap();
        let f = LinearField::constant(2, grid.sigmas().to_vec(), vec![0.0; 4], vec![1.0, -2.0]).unwrap();
        let x = Tensor::row_vector(&[0.5, 0.5]).unwrap();
        let got = exact_linear_invert_step(&f, &x, 1, &grid).unwrap();
        // x + Δσ b with Δσ = -0.25
        assert_eq!(got.data(), &[0.25, 1.0]);
    }

    #[test]
    fn exact_linear_step_hand_solved() {
        // A = [[0, 1], [-1, 0]], Δσ = -0.5 (two steps): (I + 0.5 A) x = x_next
        //   [[1, 0.5], [-0.5, 1]] x = (1, 0)  =>  det = 1.25, x = (1/1.25, 0.5/1.25) = (0.8, 0.4)
        let grid = TimeGrid::uniform(2).unwrap();
        let f = LinearField::constant(2, grid.sigmas().to_vec(), vec![0.0, 1.0, -1.0, 0.0], vec![0.0; 2]).unwrap();
        let got = exact_linear_invert_step(&f, &Tensor::row_vector(&[1.0, 0.0]).unwrap(), 0, &grid).unwrap();
        assert!((got.data()[0] - 0.8).abs() < 1e-15 && (got.data()[1] - 0.4).abs() < 1e-15, "{got:?}");
    }

    #[test]
    fn singular_system_reported() {
        // I - Δσ A = 0 with Δσ = -1, A = -I
        let grid = TimeGrid::uniform(1).unwrap();
        let f = LinearField::constant(1, vec![0.0, 1.0], vec![-1.0], vec![0.0]).unwrap();
        let err = exact_linear_invert_step(&f, &Tensor::row_vector(&[1.0]).unwrap(), 0, &grid).unwrap_err();
        assert!(matches!(err, FlowError::Singular(_)));
    }

    #[test]
    fn fixed_point_converges_to_exact_linear_inverse() {
        let grid = TimeGrid::uniform(30).unwrap();
        let f = rotation_field(8.0, grid.sigmas());
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let exact = exact_linear_invert_step(&f, &x, 12, &grid).unwrap();
        let (fp, _) =
            fixed_point_invert_step(&f, &x, 12, &grid, None, &FixedPointConfig::new(20, Aggregation::Last)).unwrap();
        assert!(fp.sub(&exact).unwrap().norm_inf() < 1e-8);
        let naive = naive_invert_step(&f, &x, 12, &grid, None).unwrap();
        let naive_gap = naive.sub(&exact).unwrap().norm_inf();
        // O(Δσ² ||A|| ||v||) gap of the naive step
        let v = f.velocity(&x, grid.sigma(12), None).unwrap().norm_inf();
        let bound = (1.0 / 30.0f64).powi(2) * 8.0 * 5f64.sqrt() * v * 2.0;
        assert!(naive_gap > 1e-6 && naive_gap < bound, "gap {naive_gap} bound {bound}");
    }

    #[test]
    fn iterate_distances_contract() {
        let grid = TimeGrid::uniform(30).unwrap();
        let scale = 8.0;
        let f = rotation_field(scale, grid.sigmas());
        // ||A||_2 = scale * sqrt(0.25 + 1) for this normal matrix
        let q = scale * 1.25f64.sqrt() / 30.0;
        assert!(q < 1.0);
        let x = Tensor::row_vector(&[1.0, -2.0]).unwrap();
        let (_, diag) =
            fixed_point_invert_step(&f, &x, 7, &grid, None, &FixedPointConfig::new(10, Aggregation::Last)).unwrap();
        for w in diag.iterate_distances.windows(2) {
            if w[0] > 1e-14 {
                assert!(w[1] <= (q + 0.05) * w[0], "{:?}", diag.iterate_distances);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let grid = TimeGrid::uniform(2).unwrap();
        let f = LinearField::constant(1, grid.sigmas().to_vec(), vec![1e4], vec![0.0]).unwrap();
        let x = Tensor::row_vector(&[1.0]).unwrap();
        let err =
            fixed_point_invert_step(&f, &x, 0, &grid, None, &FixedPointConfig::new(10, Aggregation::Last)).unwrap_err();
        assert!(matches!(err, FlowError::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn averaging_latents_equals_averaging_velocities() {
        let f = AnalyticGaussianFlow::new(vec![2.0, -1.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let x_next = gaussian_sample(&mut RngStream::new(3), &[4, 2]).unwrap();
        let t = 20;
        let h = grid.sigma(t) - grid.sigma(t + 1);
        let iters = 4;
        let (avg, _) =
            fixed_point_invert_step(&f, &x_next, t, &grid, None, &FixedPointConfig::new(iters, Aggregation::Average))
                .unwrap();
        // x_next + h * mean_i v(x^{i-1})
        let mut prev = x_next.clone();
        let mut vsum = Tensor::zeros(x_next.shape());
        for _ in 0..iters {
            let v = f.velocity(&prev, grid.sigma(t), None).unwrap();
            vsum = vsum.add(&v).unwrap();
            prev = x_next.axpy(h, &v).unwrap();
        }
        let via_velocity = x_next.axpy(h, &vsum.scale(1.0 / iters as f64)).unwrap();
        assert!(avg.sub(&via_velocity).unwrap().norm_inf() < 1e-14);
    }

    #[test]
    fn damping_still_converges() {
        let grid = TimeGrid::uniform(30).unwrap();
        let f = rotation_field(8.0, grid.sigmas());
        let x = Tensor::row_vector(&[1.0, -2.0]).unwrap();
        let exact = exact_linear_invert_step(&f, &x, 3, &grid).unwrap();
        let cfg = FixedPointConfig { iterations: 60, aggregation: Aggregation::Last, damping: 0.5 };
        let (fp, _) = fixed_point_invert_step(&f, &x, 3, &grid, None, &cfg).unwrap();
        assert!(fp.sub(&exact).unwrap().norm_inf() < 1e-8);
        let bad = FixedPointConfig { damping: 0.0, ..cfg };
        assert!(fixed_point_invert_step(&f, &x, 3, &grid, None, &bad).is_err());
    }

    #[test]
    fn inverts_constant_coupling_to_its_source() {
        let (f, x0, x1) = coupling();
        let grid = TimeGrid::uniform(30).unwrap();
        let inv = invert(&f, &x1, &grid, None, &FixedPointConfig::default()).unwrap();
        assert!(inv.noise_latent().sub(&x0).unwrap().norm_inf() < 1e-13);
        assert!(inv.compensations.is_empty());
        let inv = compute_compensations(&f, &inv, None).unwrap();
        assert!(inv.compensations.iter().all(|e| e.norm_l2() <= 1e-12));
    }

    #[test]
    fn linear_chain_matches_exact_oracle() {
        let grid = TimeGrid::uniform(30).unwrap();
        let f = rotation_field(8.0, grid.sigmas());
        let x1 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let inv = invert(&f, &x1, &grid, None, &FixedPointConfig::new(20, Aggregation::Last)).unwrap();
        let chain = exact_linear_invert(&f, &x1, &grid).unwrap();
        assert!(inv.noise_latent().sub(&chain).unwrap().norm_inf() < 1e-7);
    }

    #[test]
    fn contraction_chain_matches_exact_oracle() {
        let grid = TimeGrid::uniform(30).unwrap();
        for seed in 0..8 {
            let mut rng = RngStream::new(seed);
            let f = LinearField::random_contraction(3, grid.sigmas().to_vec(), 0.25, &mut rng).unwrap();
            let (a, _) = f.coefficients(0.0).unwrap();
            let norm = DMatrix::from_row_slice(3, 3, &a).singular_values().max();
            assert!((norm / 30.0 - 0.25).abs() < 1e-12);
            let x1 = gaussian_sample(&mut rng, &[8, 3]).unwrap();
            let inv = invert(&f, &x1, &grid, None, &FixedPointConfig::new(20, Aggregation::Last)).unwrap();
            let chain = exact_linear_invert(&f, &x1, &grid).unwrap();
            let gap = inv.noise_latent().sub(&chain).unwrap().norm_inf();
            assert!(gap <= 1e-7, "seed {seed}: gap {gap:e}");
        }
    }

    #[test]
    fn compensation_completeness_and_exact_replay() {
        let f = AnalyticGaussianFlow::new(vec![2.0, 2.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let x1 = gaussian_sample(&mut RngStream::new(9), &[16, 2]).unwrap().map(|z| 2.0 + 0.5 * z);
        for cfg in [FixedPointConfig::naive(), FixedPointConfig::default()] {
            let inv = compute_compensations(&f, &invert(&f, &x1, &grid, None, &cfg).unwrap(), None).unwrap();
            let states = &inv.trajectory.states;
            for t in 0..30 {
                let v = f.velocity(&states[t], grid.sigma(t), None).unwrap();
                let hat = states[t].axpy(grid.sigma(t + 1) - grid.sigma(t), &v).unwrap();
                let residual = states[t + 1].sub(&hat).unwrap().sub(&inv.compensations[t]).unwrap();
                assert!(residual.norm_inf() <= 1e-12);
            }
            let replay = regenerate(&f, &inv, None, true).unwrap();
            assert!(relative_linf(replay.data_end(), &x1).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn regenerate_without_stage_two_is_state_error() {
        let (f, _, x1) = coupling();
        let grid = TimeGrid::uniform(5).unwrap();
        let inv = invert(&f, &x1, &grid, None, &FixedPointConfig::default()).unwrap();
        assert!(matches!(regenerate(&f, &inv, None, true).unwrap_err(), FlowError::State(_)));
    }

    #[test]
    fn uncompensated_error_is_stage_one_residual() {
        let f = AnalyticGaussianFlow::new(vec![2.0, 2.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let x1 = gaussian_sample(&mut RngStream::new(2), &[32, 2]).unwrap().map(|z| 2.0 + 0.5 * z);
        let rows =
            round_trip_report(&f, &x1, &grid, None, &[FixedPointConfig::naive(), FixedPointConfig::default()]).unwrap();
        for r in &rows {
            assert!(r.recon_mse > 0.0);
            assert!(r.compensated_rel_err <= 1e-8);
            assert!(r.compensated_rel_err * r.compensated_rel_err < r.recon_mse);
        }
        assert!(rows[1].mean_compensation_norm < rows[0].mean_compensation_norm);
    }

    #[test]
    fn naive_round_trip_leaves_a_residual() {
        let f = AnalyticGaussianFlow::new(vec![2.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let x1 = Tensor::from_rows(&[vec![2.3], vec![1.6]]).unwrap();
        let inv = invert(&f, &x1, &grid, None, &FixedPointConfig::naive()).unwrap();
        let back = sample_ode(&f, inv.noise_latent(), &grid, None).unwrap();
        assert!(back.data_end().sub(&x1).unwrap().norm_inf() > 0.0);
    }

    #[test]
    fn iterations_improve_round_trip_median() {
        let f = AnalyticGaussianFlow::new(vec![2.0, 2.0], 0.5).unwrap();
        let grid = TimeGrid::uniform(30).unwrap();
        let root = RngStream::new(77);
        let cfgs: Vec<_> = (0..4).map(|i| FixedPointConfig::new(i, Aggregation::Average)).collect();
        let mut per_cfg = vec![Vec::new(); 4];
        for seed in 0..64 {
            let x1 = gaussian_sample(&mut root.substream(seed), &[8, 2]).unwrap().map(|z| 2.0 + 0.5 * z);
            let rows = round_trip_report(&f, &x1, &grid, None, &cfgs).unwrap();
            for (k, r) in rows.iter().enumerate() {
                per_cfg[k].push(r.recon_mse);
            }
        }
        let medians: Vec<f64> = per_cfg.iter().map(|v| median(v)).collect();
        assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
        assert!(medians[3] < medians[0]);
    }
}
