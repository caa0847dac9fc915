use flowinv_core::fields::{AnalyticGaussianFlow, Condition, FieldSpec};
use flowinv_core::inversion::{
    compute_compensations, invert as invert_field, regenerate, relative_linf, FixedPointConfig, InversionResult,
};
use flowinv_core::io::{write_compensations_csv, write_diagnostics_csv, write_trajectory_csv};
use flowinv_core::numerics::{RngStream, Tensor};
use flowinv_core::samplers::TimeGrid;
use flowinv_core::training::make_dataset;
use serde::{Deserialize, Serialize};

use super::{finite, positive, read_input, write_samples, FieldSource, LoadedField};
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

/// Shared by `invert` and `reconstruct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub field: FieldSource,
    /// Samples CSV to invert; drawn from the field's data distribution when absent.
    pub input: Option<String>,
    pub samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub fixed_point: FixedPointConfig,
    pub prompt: Option<Vec<u32>>,
    pub w_inv: f64,
    /// Bound on the compensated reconstruction error checked by `reconstruct`.
    pub max_recon_rel_err: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            field: FieldSource::Oracle(FieldSpec::AnalyticGaussian { mu: vec![2.0, 2.0], s: 0.5 }),
            input: None,
            samples: 16,
            seed: 0,
            steps: 30,
            fixed_point: FixedPointConfig::default(),
            prompt: None,
            w_inv: 1.0,
            max_recon_rel_err: 1e-8,
        }
    }
}

impl CommandConfig for InversionConfig {
    fn validate(&self) -> Result<(), CliError> {
        positive("samples", self.samples)?;
        positive("steps", self.steps)?;
        finite("w_inv", self.w_inv)?;
        if !(self.fixed_point.damping > 0.0 && self.fixed_point.damping <= 1.0) {
            return Err(CliError::usage(format!("fixed_point.damping {} outside (0, 1]", self.fixed_point.damping)));
        }
        if !(self.max_recon_rel_err >= 0.0) {
            return Err(CliError::usage("max_recon_rel_err must be nonnegative"));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

struct Prepared {
    loaded: LoadedField,
    x1: Tensor,
    cond: Option<Condition>,
    grid: TimeGrid,
}

fn prepare(cfg: &InversionConfig) -> Result<Prepared, CliError> {
    let loaded = cfg.field.load()?;
    let mut prompt = cfg.prompt.clone();
    let x1 = match &cfg.input {
        Some(path) => {
            let (x, prompts) = read_input(path)?;
            if prompt.is_none() {
                if let Some(p) = prompts {
                    if p.windows(2).any(|w| w[0] != w[1]) {
                        return Err(CliError::usage("input rows carry different prompts; set `prompt`"));
                    }
                    prompt = p.into_iter().next();
                }
            }
            x
        }
        None => draw_inputs(cfg, &loaded)?,
    };
    Ok(Prepared { cond: prompt.map(|p| Condition::new(p, cfg.w_inv)), x1, grid: TimeGrid::uniform(cfg.steps)?, loaded })
}

fn draw_inputs(cfg: &InversionConfig, loaded: &LoadedField) -> Result<Tensor, CliError> {
    let mut rng = RngStream::new(cfg.seed);
    if let Some(spec) = &loaded.dataset {
        let mut ds = make_dataset(spec.clone(), rng.next_u64())?;
        return Ok(match &cfg.prompt {
            Some(p) if spec.is_conditional() => ds.sample_prompt(p, cfg.samples)?,
            _ => ds.sample(cfg.samples)?.x,
        });
    }
    if let FieldSource::Oracle(FieldSpec::AnalyticGaussian { mu, s }) = &cfg.field {
        return Ok(AnalyticGaussianFlow::new(mu.clone(), *s)?.sample_target(&mut rng, cfg.samples)?);
    }
    Ok(rng.gaussian(&[cfg.samples, loaded.field.dim()])?)
}

fn run_inversion(p: &Prepared, fp: &FixedPointConfig) -> Result<InversionResult, CliError> {
    let field = &*p.loaded.field;
    let inv = invert_field(field, &p.x1, &p.grid, p.cond.as_ref(), fp)?;
    Ok(compute_compensations(field, &inv, p.cond.as_ref())?)
}

fn compensation_metrics(inv: &InversionResult, report: &mut Report) {
    let norms: Vec<f64> = inv.compensations.iter().map(Tensor::mean_row_norm).collect();
    let gaps = &inv.diagnostics.velocity_gaps;
    report.metric("mean_compensation_norm", norms.iter().sum::<f64>() / norms.len() as f64, "l2");
    report.metric(
        "max_compensation_norm",
        inv.compensations.iter().map(Tensor::max_row_norm).fold(0.0, f64::max),
        "l2",
    );
    report.metric("velocity_gap_mean", gaps.iter().sum::<f64>() / gaps.len() as f64, "l2");
    report.metric("velocity_gap_max", gaps.iter().copied().fold(0.0, f64::max), "l2");
}

pub(super) fn invert(cfg: &InversionConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let p = prepare(cfg)?;
    let inv = run_inversion(&p, &cfg.fixed_point)?;
    write_samples(dir, "latent.csv", inv.noise_latent(), None)?;
    write_trajectory_csv(&mut dir.artifact("trajectory.csv")?, &p.grid, &inv.trajectory.states)?;
    write_compensations_csv(&mut dir.artifact("compensations.csv")?, &inv)?;
    write_diagnostics_csv(&mut dir.artifact("diagnostics.csv")?, &inv)?;
    report.metric("samples", p.x1.rows() as f64, "count");
    report.metric("steps", cfg.steps as f64, "count");
    report.metric("iterations", cfg.fixed_point.iterations as f64, "count");
    compensation_metrics(&inv, report);
    let last_distance =
        inv.diagnostics.steps.iter().filter_map(|s| s.iterate_distances.last().copied()).fold(0.0, f64::max);
    report.metric("max_final_iterate_distance", last_distance, "l2");
    report.metric("latent_mean_row_norm", inv.noise_latent().mean_row_norm(), "l2");
    Ok(())
}

pub(super) fn reconstruct(cfg: &InversionConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let p = prepare(cfg)?;
    let field = &*p.loaded.field;
    let cond = p.cond.as_ref();
    let inv = run_inversion(&p, &cfg.fixed_point)?;
    let compensated = regenerate(field, &inv, cond, true)?;
    let plain = regenerate(field, &inv, cond, false)?;
    let naive = run_inversion(&p, &FixedPointConfig::naive())?;
    let naive_plain = regenerate(field, &naive, cond, false)?;
    write_samples(dir, "reconstruction.csv", compensated.data_end(), None)?;
    write_samples(dir, "latent.csv", inv.noise_latent(), None)?;
    write_compensations_csv(&mut dir.artifact("compensations.csv")?, &inv)?;

    let recon_rel_err = relative_linf(compensated.data_end(), &p.x1)?;
    report.metric("samples", p.x1.rows() as f64, "count");
    report.metric("steps", cfg.steps as f64, "count");
    report.metric("iterations", cfg.fixed_point.iterations as f64, "count");
    report.metric("recon_rel_err", recon_rel_err, "relative_linf");
    report.metric("recon_mse", plain.data_end().mse(&p.x1)?, "mse");
    report.metric("naive_recon_mse", naive_plain.data_end().mse(&p.x1)?, "mse");
    compensation_metrics(&inv, report);
    report.check("compensated_reconstruction", recon_rel_err <= cfg.max_recon_rel_err, || {
        format!("relative error {recon_rel_err:e} exceeds {:e}", cfg.max_recon_rel_err)
    });
    Ok(())
}
