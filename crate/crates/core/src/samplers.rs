//! Forward solvers: Euler on the rectified-flow ODE, DDIM on a diffusion schedule, and
//! classifier-free guidance.
//!
//! Grid index `t` always runs from the noise end (`t = 0`) to the data end (`t = T`).

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::{Condition, GaussianMixtureScore, VelocityField};
use crate::numerics::Tensor;

/// Ascending σ nodes with `σ_0 = 0` and `σ_T = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    sigmas: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FlowError::invalid("time grid needs at least one step"));
        }
        let mut sigmas: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        sigmas[steps] = 1.0;
        Ok(Self { sigmas })
    }

    /// Uniform grid warped by the resolution shift applied to the noise level
    /// `n = 1 - σ`: `n' = k n / (1 + (k - 1) n)`. `k = 1` is the uniform grid.
    pub fn shifted(steps: usize, shift: f64) -> Result<Self> {
        if !(shift > 0.0) {
            return Err(FlowError::invalid(format!("grid shift must be positive, got {shift}")));
        }
        let base = Self::uniform(steps)?;
        let sigmas = base
            .sigmas
            .iter()
            .map(|&s| {
                let n = 1.0 - s;
                1.0 - shift * n / (1.0 + (shift - 1.0) * n)
            })
            .collect();
        Self::from_sigmas(sigmas)
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || sigmas[0] != 0.0 || *sigmas.last().unwrap() != 1.0 {
            return Err(FlowError::invalid("grid must start at exactly 0 and end at exactly 1"));
        }
        if sigmas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(FlowError::invalid("grid must be strictly increasing"));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(FlowError::invalid(format!("step {t} out of range for {} steps", self.steps())));
        }
        Ok(())
    }
}

/// Latent states at every grid node, noise end first.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Tensor>,
    pub condition: Option<Condition>,
}

impl Trajectory {
    pub fn noise_end(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn data_end(&self) -> &Tensor {
        self.states.last().expect("trajectory has states")
    }
}

/// Guided velocity `v_u + w (v_c - v_u)`. `w = 1` returns the conditional velocity
/// without evaluating the unconditional branch.
pub fn cfg_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    sigma: f64,
    tokens: &[u32],
    w: f64,
) -> Result<Tensor> {
    if w == 1.0 {
        return field.velocity(x, sigma, Some(tokens));
    }
    if !field.supports_unconditional() {
        return Err(FlowError::Capability("field has no unconditional (null-prompt) branch".into()));
    }
    let cond = field.velocity(x, sigma, Some(tokens))?;
    let uncond = field.velocity(x, sigma, None)?;
    let diff = cond.sub(&uncond)?;
    uncond.axpy(w, &diff)
}

/// Velocity under an optional condition; `None` is the unconditional field.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    sigma: f64,
    cond: Option<&Condition>,
) -> Result<Tensor> {
    match cond {
        None => field.velocity(x, sigma, None),
        Some(c) => cfg_velocity(field, x, sigma, &c.tokens, c.guidance),
    }
}

/// One Euler step `x + (σ_{t+1} - σ_t) v(x, σ_t)`.
pub fn euler_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    t: usize,
    grid: &TimeGrid,
    cond: Option<&Condition>,
) -> Result<Tensor> {
    grid.check_step(t)?;
    let v = guided_velocity(field, x, grid.sigma(t), cond)?;
    let next = x.axpy(grid.sigma(t + 1) - grid.sigma(t), &v)?;
    next.ensure_finite(&format!("euler step {t}"))?;
    Ok(next)
}

/// Integrates from the noise end to the data end, recording every state.
pub fn sample_ode<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Tensor,
    grid: &TimeGrid,
    cond: Option<&Condition>,
) -> Result<Trajectory> {
    x0.ensure_finite("initial state")?;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(x0.clone());
    for t in 0..grid.steps() {
        let next = euler_step(field, &states[t], t, grid, cond)?;
        states.push(next);
    }
    Ok(Trajectory { grid: grid.clone(), states, condition: cond.cloned() })
}

/// Cumulative signal levels `ᾱ_t`, nondecreasing from the noise end (`t = 0`) to the
/// data end (`t = T`, where `ᾱ = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.len() < 2 {
            return Err(FlowError::Schedule("schedule needs at least one step".into()));
        }
        if alphas_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(FlowError::Schedule("alpha_bar values must lie in (0, 1]".into()));
        }
        if alphas_bar.windows(2).any(|w| w[0] > w[1]) {
            return Err(FlowError::Schedule("alpha_bar must be nondecreasing towards the data end".into()));
        }
        Ok(Self { alphas_bar })
    }

    /// Cosine schedule (offset 0.008) sampled at `steps` uniform noise levels, with the
    /// per-step retention `ᾱ_t / ᾱ_{t+1}` clipped at 0.001 near the noise end.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FlowError::Schedule("schedule needs at least one step".into()));
        }
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(1.0 - t as f64 / steps as f64) / f0).collect();
        let mut ab = vec![1.0; steps + 1];
        for t in (0..steps).rev() {
            let retain = (raw[t] / raw[t + 1]).max(0.001);
            ab[t] = ab[t + 1] * retain;
        }
        Self::new(ab)
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| FlowError::Schedule(format!("step {t} outside schedule of {} steps", self.steps())))
    }
}

/// Predicted clean sample `(x - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)`.
pub fn ddim_predict_x0(
    score: &GaussianMixtureScore,
    x: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let eps = score.predict_noise(x, ab)?;
    predict_x0_from(x, &eps, ab)
}

fn predict_x0_from(x: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    if !(ab > 0.0) {
        return Err(FlowError::Schedule(format!("alpha_bar {ab} must be positive")));
    }
    Ok(x.axpy(-(1.0 - ab).sqrt(), eps)?.scale(1.0 / ab.sqrt()))
}

/// Deterministic DDIM update `x_{t+1} = sqrt(ᾱ_{t+1}) f(x_t) + sqrt(1 - ᾱ_{t+1}) ε̂(x_t)`.
pub fn ddim_step(score: &GaussianMixtureScore, x: &Tensor, t: usize, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_next = schedule.alpha_bar(t + 1)?;
    if ab_next == ab {
        return Ok(x.clone());
    }
    let eps = score.predict_noise(x, ab)?;
    let x0 = predict_x0_from(x, &eps, ab)?;
    let next = x0.scale(ab_next.sqrt()).axpy((1.0 - ab_next).sqrt(), &eps)?;
    next.ensure_finite(&format!("ddim step {t}"))?;
    Ok(next)
}

/// Naive DDIM inversion from `x_{t+1}` to `x_t`: the noise prediction is taken at the
/// known state `x_{t+1}` (and its level `ᾱ_{t+1}`) in place of the unknown `x_t`.
pub fn ddim_invert_step(
    score: &GaussianMixtureScore,
    x_next: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_next = schedule.alpha_bar(t + 1)?;
    if ab_next == ab {
        return Ok(x_next.clone());
    }
    let eps = score.predict_noise(x_next, ab_next)?;
    let x0 = predict_x0_from(x_next, &eps, ab_next)?;
    x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), &eps)
}

/// Checks that DDIM is a first-order solver in `y = x / sqrt(ᾱ)`:
/// `y_{t+1} - y_t = (ρ_{t+1} - ρ_t) ε̂(x_t)` with `ρ = sqrt((1 - ᾱ) / ᾱ)`.
/// Returns the largest absolute deviation from that identity.
pub fn rescaled_ddim_check(
    score: &GaussianMixtureScore,
    x: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    let ab_next = schedule.alpha_bar(t + 1)?;
    let next = ddim_step(score, x, t, schedule)?;
    let y = x.scale(1.0 / ab.sqrt());
    let y_next = next.scale(1.0 / ab_next.sqrt());
    let rho = |a: f64| ((1.0 - a) / a).sqrt();
    let increment = y_next.sub(&y)?;
    if ab_next == ab {
        return Ok(increment.norm_inf());
    }
    let eps = score.predict_noise(x, ab)?;
    Ok(increment.axpy(-(rho(ab_next) - rho(ab)), &eps)?.norm_inf())
}

/// Full DDIM sampling pass from the noise end.
pub fn ddim_sample(score: &GaussianMixtureScore, x0: &Tensor, schedule: &DiffusionSchedule) -> Result<Vec<Tensor>> {
    let mut states = vec![x0.clone()];
    for t in 0..schedule.steps() {
        let next = ddim_step(score, &states[t], t, schedule)?;
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticGaussianFlow, ConstantCouplingField, LinearField, ZeroField};
    use crate::numerics::{energy_distance, gaussian_sample, RngStream};

    #[test]
    fn grid_endpoints_and_errors() {
        let g = TimeGrid::uniform(30).unwrap();
        assert_eq!(g.sigma(0), 0.0);
        assert_eq!(g.sigma(30), 1.0);
        assert!(TimeGrid::uniform(0).is_err());
        assert!(TimeGrid::from_sigmas(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        let s = TimeGrid::shifted(10, 3.0).unwrap();
        assert_eq!(s.sigmas()[0], 0.0);
        assert_eq!(s.sigmas()[10], 1.0);
        assert_eq!(TimeGrid::shifted(10, 1.0).unwrap().steps(), 10);
    }

    #[test]
    fn zero_field_step_is_identity() {
        let g = TimeGrid::uniform(5).unwrap();
        let x = Tensor::row_vector(&[1.0, -2.0]).unwrap();
        assert_eq!(euler_step(&ZeroField(2), &x, 2, &g, None).unwrap(), x);
        assert!(euler_step(&ZeroField(2), &x, 5, &g, None).is_err());
    }

    #[test]
    fn constant_coupling_is_integrated_exactly() {
        let x0 = Tensor::row_vector(&[0.25, -1.0]).unwrap();
        let x1 = Tensor::row_vector(&[2.0, 0.5]).unwrap();
        let f = ConstantCouplingField::new(x0.clone(), x1.clone()).unwrap();
        for steps in [1, 7, 30, 64] {
            let traj = sample_ode(&f, &x0, &TimeGrid::uniform(steps).unwrap(), None).unwrap();
            assert_eq!(traj.states.len(), steps + 1);
            assert!(traj.data_end().sub(&x1).unwrap().norm_inf() < 1e-14);
        }
    }

    #[test]
    fn euler_on_gaussian_flow_hits_target_distribution() {
        let f = AnalyticGaussianFlow::new(vec![2.0], 0.5).unwrap();
        let mut rng = RngStream::new(10);
        let x0 = gaussian_sample(&mut rng, &[10_000, 1]).unwrap();
        let traj = sample_ode(&f, &x0, &TimeGrid::uniform(30).unwrap(), None).unwrap();
        let target = gaussian_sample(&mut rng, &[10_000, 1]).unwrap().map(|z| 2.0 + 0.5 * z);
        let ed = energy_distance(traj.data_end(), &target).unwrap();
        assert!(ed <= 0.05, "energy distance {ed}");
    }

    #[test]
    fn first_order_convergence() {
        let f = AnalyticGaussianFlow::new(vec![2.0, -1.0], 0.5).unwrap();
        let x0 = gaussian_sample(&mut RngStream::new(4), &[64, 2]).unwrap();
        let exact = f.exact_flow(&x0, 1.0).unwrap();
        let err = |steps: usize| {
            let traj = sample_ode(&f, &x0, &TimeGrid::uniform(steps).unwrap(), None).unwrap();
            traj.data_end().sub(&exact).unwrap().norm_inf()
        };
        for steps in [10, 20, 40] {
            let ratio = err(steps) / err(2 * steps);
            assert!((1.7..=2.3).contains(&ratio), "T={steps}: ratio {ratio}");
        }
    }

    /// Toy conditional field: v = x * k(token) with k(null) = 0.5.
    struct Scaled;
    impl VelocityField for Scaled {
        fn dim(&self) -> usize {
            2
        }
        fn velocity(&self, x: &Tensor, _s: f64, tokens: Option<&[u32]>) -> Result<Tensor> {
            let k = tokens.map(|t| 1.0 + t[0] as f64).unwrap_or(0.5);
            x.scale(k).axpy(1.0, &Tensor::row_vector(&[0.25, -0.75])?)
        }
    }

    struct CondOnly;
    impl VelocityField for CondOnly {
        fn dim(&self) -> usize {
            1
        }
        fn velocity(&self, x: &Tensor, _s: f64, _t: Option<&[u32]>) -> Result<Tensor> {
            Ok(x.clone())
        }
        fn supports_unconditional(&self) -> bool {
            false
        }
    }

    #[test]
    fn guidance_weights() {
        let x = Tensor::row_vector(&[1.5, -0.5]).unwrap();
        let vc = Scaled.velocity(&x, 0.3, Some(&[2])).unwrap();
        let vu = Scaled.velocity(&x, 0.3, None).unwrap();
        assert_eq!(cfg_velocity(&Scaled, &x, 0.3, &[2], 0.0).unwrap(), vu);
        assert_eq!(cfg_velocity(&Scaled, &x, 0.3, &[2], 1.0).unwrap(), vc);
        // v_c = (4.75, -2.25), v_u = (1.0, -1.0): 2 v_c - v_u = (8.5, -3.5)
        let v2 = cfg_velocity(&Scaled, &x, 0.3, &[2], 2.0).unwrap();
        assert!(v2.sub(&Tensor::row_vector(&[8.5, -3.5]).unwrap()).unwrap().norm_inf() < 1e-14);
        let err = cfg_velocity(&CondOnly, &Tensor::row_vector(&[1.0]).unwrap(), 0.3, &[0], 2.0).unwrap_err();
        assert!(matches!(err, FlowError::Capability(_)));
    }

    #[test]
    fn nan_state_aborts_naming_step() {
        let f = LinearField::constant(1, vec![0.0, 1.0], vec![1e308], vec![0.0]).unwrap();
        let x = Tensor::row_vector(&[10.0]).unwrap();
        let err = sample_ode(&f, &x, &TimeGrid::uniform(4).unwrap(), None).unwrap_err();
        assert!(err.to_string().contains("euler step 0"), "{err}");
    }

    fn single_gaussian() -> GaussianMixtureScore {
        GaussianMixtureScore::single(vec![1.0, -0.5], vec![0.3, 0.2]).unwrap()
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(50).unwrap(), 1.0);
        assert!(s.alpha_bar(0).unwrap() > 0.0 && s.alpha_bar(0).unwrap() < 1e-3);
        assert!(s.alphas_bar().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn predict_x0_algebra() {
        let s = DiffusionSchedule::new(vec![0.25, 1.0]).unwrap();
        // ε̂ ≡ 0 for a standard normal at its mean
        let f = GaussianMixtureScore::single(vec![0.0], vec![1.0]).unwrap();
        let x = Tensor::row_vector(&[0.0]).unwrap();
        assert_eq!(ddim_predict_x0(&f, &x, 0, &s).unwrap(), x.scale(2.0));
        let y = Tensor::row_vector(&[0.7]).unwrap();
        assert_eq!(ddim_predict_x0(&f, &y, 1, &s).unwrap(), y);
    }

    #[test]
    fn predict_x0_is_posterior_mean() {
        let (m, v) = (1.0, 0.3);
        let f = GaussianMixtureScore::single(vec![m], vec![v]).unwrap();
        let s = DiffusionSchedule::cosine(50).unwrap();
        for t in [2, 10, 25] {
            let ab = s.alpha_bar(t).unwrap();
            for x in [-1.0, 0.2, 2.0] {
                let got = ddim_predict_x0(&f, &Tensor::row_vector(&[x]).unwrap(), t, &s).unwrap().data()[0];
                let post = m + ab.sqrt() * v / (ab * v + 1.0 - ab) * (x - ab.sqrt() * m);
                assert!((got - post).abs() < 1e-12 * (1.0 + post.abs() / ab.sqrt()), "t={t} x={x}: {got} vs {post}");
            }
        }
    }

    #[test]
    fn ddim_step_with_equal_levels_is_fixed_point() {
        let f = GaussianMixtureScore::single(vec![0.0], vec![1.0]).unwrap();
        let s = DiffusionSchedule::new(vec![0.2, 0.5, 0.5, 1.0]).unwrap();
        let x = Tensor::row_vector(&[0.8]).unwrap();
        assert_eq!(ddim_step(&f, &x, 1, &s).unwrap(), x);
    }

    #[test]
    fn ddim_zero_noise_prediction_rescales() {
        // A standard normal has ε̂(0) = 0, so x_{t+1} = sqrt(ab_{t+1} / ab_t) x_t there.
        let s = DiffusionSchedule::new(vec![0.2, 0.5]).unwrap();
        let x = Tensor::row_vector(&[0.0, 0.0]).unwrap();
        let f = GaussianMixtureScore::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(ddim_step(&f, &x, 0, &s).unwrap(), x.scale((0.5f64 / 0.2).sqrt()));
    }

    #[test]
    fn rescaled_identity_holds() {
        let f = single_gaussian();
        let s = DiffusionSchedule::cosine(50).unwrap();
        let mut rng = RngStream::new(8);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t = rng.below(50);
            let x = gaussian_sample(&mut rng, &[1, 2]).unwrap();
            worst = worst.max(rescaled_ddim_check(&f, &x, t, &s).unwrap());
        }
        assert!(worst <= 1e-10, "{worst}");
        let flat = DiffusionSchedule::new(vec![0.3, 0.3, 1.0]).unwrap();
        let x = Tensor::row_vector(&[0.4, 0.9]).unwrap();
        assert_eq!(rescaled_ddim_check(&f, &x, 0, &flat).unwrap(), 0.0);
    }

    #[test]
    fn ddim_sampling_reaches_data_distribution() {
        let f = GaussianMixtureScore::new(
            vec![0.4, 0.6],
            vec![vec![-1.5, 0.0], vec![1.5, 0.5]],
            vec![vec![0.1, 0.2], vec![0.2, 0.1]],
        )
        .unwrap();
        let s = DiffusionSchedule::cosine(50).unwrap();
        let mut rng = RngStream::new(21);
        let x0 = gaussian_sample(&mut rng, &[10_000, 2]).unwrap();
        let states = ddim_sample(&f, &x0, &s).unwrap();
        let data = f.sample(&mut rng, 10_000).unwrap();
        let ed = energy_distance(states.last().unwrap(), &data).unwrap();
        assert!(ed <= 0.05, "energy distance {ed}");
    }
}
