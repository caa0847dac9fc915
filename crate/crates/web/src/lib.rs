//! WebAssembly bindings for the browser demo. [`Demo`] wraps the analytic Gaussian
//! flow; the plain methods are usable natively, the `js_*` exports wrap them for
//! JavaScript with flat `Float64Array` point buffers `[x0, y0, x1, y1, ...]`.

use flowinv_core::fields::AnalyticGaussianFlow;
use flowinv_core::inversion::{
    compute_compensations, invert, regenerate, relative_linf, Aggregation, FixedPointConfig,
};
use flowinv_core::numerics::{RngStream, Tensor};
use flowinv_core::samplers::{sample_ode, TimeGrid};
use flowinv_core::Result;
use wasm_bindgen::prelude::*;

/// Outcome of inverting a batch and regenerating it with and without compensation.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    latent: Vec<f64>,
    plain: Vec<f64>,
    compensated: Vec<f64>,
    plain_mse: f64,
    compensated_rel_err: f64,
}

#[wasm_bindgen]
impl RoundTrip {
    /// Inverted noise latents.
    #[wasm_bindgen(getter)]
    pub fn latent(&self) -> Vec<f64> {
        self.latent.clone()
    }

    /// Regeneration without compensation.
    #[wasm_bindgen(getter)]
    pub fn plain(&self) -> Vec<f64> {
        self.plain.clone()
    }

    /// Regeneration with compensation.
    #[wasm_bindgen(getter)]
    pub fn compensated(&self) -> Vec<f64> {
        self.compensated.clone()
    }

    #[wasm_bindgen(getter, js_name = plainMse)]
    pub fn plain_mse(&self) -> f64 {
        self.plain_mse
    }

    #[wasm_bindgen(getter, js_name = compensatedRelErr)]
    pub fn compensated_rel_err(&self) -> f64 {
        self.compensated_rel_err
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Demo {
    field: AnalyticGaussianFlow,
    grid: TimeGrid,
}

fn points(flat: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![flat.len() / 2, 2], flat.to_vec())
}

fn js(e: flowinv_core::FlowError) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    pub fn create(mu_x: f64, mu_y: f64, s: f64, steps: usize) -> Result<Self> {
        Ok(Self { field: AnalyticGaussianFlow::new(vec![mu_x, mu_y], s)?, grid: TimeGrid::uniform(steps)? })
    }

    /// Euler trajectories of `n` noise draws, state-major: `steps + 1` blocks of `2n`.
    pub fn trajectories(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = RngStream::new(seed);
        let x0 = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect())?;
        let traj = sample_ode(&self.field, &x0, &self.grid, None)?;
        Ok(traj.states.iter().flat_map(|s| s.data().iter().copied()).collect())
    }

    /// Inverts `flat` with `iterations` averaged fixed-point iterations per step.
    pub fn round_trip(&self, flat: &[f64], iterations: usize) -> Result<RoundTrip> {
        let x1 = points(flat)?;
        let cfg = FixedPointConfig { iterations, aggregation: Aggregation::Average, damping: 1.0 };
        let inv = compute_compensations(&self.field, &invert(&self.field, &x1, &self.grid, None, &cfg)?, None)?;
        let plain = regenerate(&self.field, &inv, None, false)?;
        let comp = regenerate(&self.field, &inv, None, true)?;
        Ok(RoundTrip {
            latent: inv.noise_latent().data().to_vec(),
            plain_mse: plain.data_end().mse(&x1)?,
            compensated_rel_err: relative_linf(comp.data_end(), &x1)?,
            plain: plain.data_end().data().to_vec(),
            compensated: comp.data_end().data().to_vec(),
        })
    }

    /// Uncompensated round-trip MSE for `I = 0..=max_iterations`.
    pub fn iteration_curve(&self, flat: &[f64], max_iterations: usize) -> Result<Vec<f64>> {
        (0..=max_iterations).map(|i| Ok(self.round_trip(flat, i)?.plain_mse)).collect()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn js_new(mu_x: f64, mu_y: f64, s: f64, steps: usize) -> std::result::Result<Demo, JsError> {
        Self::create(mu_x, mu_y, s, steps).map_err(js)
    }

    #[wasm_bindgen(js_name = trajectories)]
    pub fn js_trajectories(&self, n: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.trajectories(n, u64::from(seed)).map_err(js)
    }

    #[wasm_bindgen(js_name = roundTrip)]
    pub fn js_round_trip(&self, flat: &[f64], iterations: usize) -> std::result::Result<RoundTrip, JsError> {
        self.round_trip(flat, iterations).map_err(js)
    }

    #[wasm_bindgen(js_name = iterationCurve)]
    pub fn js_iteration_curve(&self, flat: &[f64], max_iterations: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.iteration_curve(flat, max_iterations).map_err(js)
    }
}
