use flowinv_core::editing::{
    factor_b_trials, output_displacements, DitArch, EditOptions, EditSettings, EditTrial, TrialPlan, TrialSummary,
};
use flowinv_core::fields::{AnalyticGaussianFlow, LinearField};
use flowinv_core::inversion::{exact_linear_invert, invert, iteration_sweep, Aggregation, FixedPointConfig};
use flowinv_core::numerics::{median, RngStream};
use flowinv_core::samplers::TimeGrid;
use flowinv_core::training::{check_rf_gradient, make_dataset, Architecture, DatasetSpec, MlpArch};
use serde::{Deserialize, Serialize};

use super::{fraction, load_checkpoint, positive};
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

pub const ABLATION_HEADER: [&str; 6] =
    ["iterations", "aggregation", "mse", "max_compensated_rel_err", "mean_compensation_norm", "velocity_gap"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Round-trip error against fixed-point iteration count on the analytic flow.
    IterationSweep,
    /// Fixed-point inversion against the exact inverse of contracting linear fields.
    LinearOracle,
    /// Finite-difference check of both architectures' loss gradients.
    GradientCheck,
    /// Edit outputs against the Map cutoff `S` on a trained mini-DiT.
    SSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSuite {
    pub mu: Vec<f64>,
    pub s: f64,
    pub steps: usize,
    pub iterations: Vec<usize>,
    pub aggregation: Aggregation,
    pub samples: usize,
    pub max_compensated_rel_err: f64,
}

impl Default for SweepSuite {
    fn default() -> Self {
        Self {
            mu: vec![2.0, 2.0],
            s: 0.5,
            steps: 30,
            iterations: vec![0, 1, 2, 3],
            aggregation: Aggregation::Average,
            samples: 8,
            max_compensated_rel_err: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSuite {
    pub dim: usize,
    /// Contraction factor `max Δσ ||A||₂` of the checked fields.
    pub contraction: f64,
    /// A further factor that is measured and reported but not checked.
    pub report_contraction: Option<f64>,
    pub steps: usize,
    pub iterations: usize,
    pub fields: usize,
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for OracleSuite {
    fn default() -> Self {
        Self {
            dim: 3,
            contraction: 0.25,
            report_contraction: Some(0.5),
            steps: 30,
            iterations: 20,
            fields: 8,
            samples: 8,
            tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSuite {
    pub points: Vec<u64>,
    pub batch_size: usize,
    pub tolerance: f64,
}

impl Default for GradientSuite {
    fn default() -> Self {
        Self { points: vec![0, 1, 2], batch_size: 8, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SSweepSuite {
    pub checkpoint: Option<String>,
    pub s_fractions: Vec<f64>,
    pub seeds: usize,
    pub samples: usize,
    pub root_seed: u64,
    pub steps: usize,
    pub fixed_point: FixedPointConfig,
    pub w_inv: f64,
    pub w_edit: f64,
    pub options: EditOptions,
}

impl Default for SSweepSuite {
    fn default() -> Self {
        Self {
            checkpoint: None,
            s_fractions: vec![0.0, 0.6, 0.9],
            seeds: 32,
            samples: 1,
            root_seed: 7,
            steps: 30,
            fixed_point: FixedPointConfig::default(),
            w_inv: 1.0,
            w_edit: 2.0,
            options: EditOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub suites: Vec<Suite>,
    pub seed: u64,
    /// Seeds of the iteration sweep.
    pub seeds: usize,
    pub sweep: SweepSuite,
    pub oracle: OracleSuite,
    pub gradient: GradientSuite,
    pub s_sweep: SSweepSuite,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suites: vec![Suite::IterationSweep, Suite::LinearOracle, Suite::GradientCheck],
            seed: 2024,
            seeds: 64,
            sweep: SweepSuite::default(),
            oracle: OracleSuite::default(),
            gradient: GradientSuite::default(),
            s_sweep: SSweepSuite::default(),
        }
    }
}

impl CommandConfig for BenchConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.suites.is_empty() {
            return Err(CliError::usage("no bench suites selected"));
        }
        positive("seeds", self.seeds)?;
        positive("sweep.steps", self.sweep.steps)?;
        positive("sweep.samples", self.sweep.samples)?;
        if self.sweep.iterations.is_empty() {
            return Err(CliError::usage("sweep.iterations is empty"));
        }
        AnalyticGaussianFlow::new(self.sweep.mu.clone(), self.sweep.s)?;
        let o = &self.oracle;
        for q in std::iter::once(o.contraction).chain(o.report_contraction) {
            if !(q > 0.0 && q < 1.0) {
                return Err(CliError::usage(format!("contraction factor {q} outside (0, 1)")));
            }
        }
        positive("oracle.dim", o.dim)?;
        positive("oracle.steps", o.steps)?;
        positive("oracle.fields", o.fields)?;
        positive("oracle.samples", o.samples)?;
        positive("gradient.batch_size", self.gradient.batch_size)?;
        if self.suites.contains(&Suite::SSweep) {
            if self.s_sweep.checkpoint.is_none() {
                return Err(CliError::usage("the s_sweep suite needs `s_sweep.checkpoint`"));
            }
            for s in &self.s_sweep.s_fractions {
                fraction("s_sweep.s_fractions", *s)?;
            }
            positive("s_sweep.seeds", self.s_sweep.seeds)?;
            positive("s_sweep.samples", self.s_sweep.samples)?;
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub(super) fn bench(cfg: &BenchConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    for suite in &cfg.suites {
        match suite {
            Suite::IterationSweep => iteration_suite(cfg, dir, report)?,
            Suite::LinearOracle => oracle_suite(cfg, report)?,
            Suite::GradientCheck => gradient_suite(cfg, report)?,
            Suite::SSweep => s_sweep_suite(cfg, dir, report)?,
        }
    }
    Ok(())
}

fn iteration_suite(cfg: &BenchConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let s = &cfg.sweep;
    let field = AnalyticGaussianFlow::new(s.mu.clone(), s.s)?;
    let cfgs: Vec<FixedPointConfig> = s.iterations.iter().map(|&i| FixedPointConfig::new(i, s.aggregation)).collect();
    let grid = TimeGrid::uniform(s.steps)?;
    let rows = iteration_sweep(&field, &grid, &cfgs, cfg.seeds, s.samples, &RngStream::new(cfg.seed))?;
    let mut w = csv::Writer::from_writer(dir.artifact("ablation.csv")?);
    w.write_record(ABLATION_HEADER)?;
    for r in &rows {
        w.write_record([
            r.iterations.to_string(),
            serde_json::to_value(r.aggregation)?.as_str().unwrap_or_default().to_string(),
            r.median_recon_mse.to_string(),
            r.max_compensated_rel_err.to_string(),
            r.median_mean_compensation_norm.to_string(),
            r.median_velocity_gap.to_string(),
        ])?;
        report.metric(format!("mse@I={}", r.iterations), r.median_recon_mse, "mse");
    }
    w.flush()?;
    let first = rows.first().map_or(f64::NAN, |r| r.median_recon_mse);
    let last = rows.last().map_or(f64::NAN, |r| r.median_recon_mse);
    report.metric("mse_ratio_first_to_last", first / last, "ratio");
    let comp = rows.iter().map(|r| r.max_compensated_rel_err).fold(0.0, f64::max);
    report.metric("max_compensated_rel_err", comp, "relative_linf");
    let pairs: Vec<(usize, usize)> = s.iterations.windows(2).map(|w| (w[0], w[1])).collect();
    let increasing = pairs.iter().all(|(a, b)| a < b);
    let monotone = rows.windows(2).all(|w| w[1].median_recon_mse <= w[0].median_recon_mse);
    report.check("iteration_mse_nonincreasing", !increasing || monotone, || {
        let mses: Vec<f64> = rows.iter().map(|r| r.median_recon_mse).collect();
        format!("median MSE over iterations {:?}: {mses:?}", s.iterations)
    });
    report.check("compensated_reconstruction", comp <= s.max_compensated_rel_err, || {
        format!("relative error {comp:e} exceeds {:e}", s.max_compensated_rel_err)
    });
    Ok(())
}

/// Largest terminal L∞ gap between fixed-point and exact inversion over random fields.
fn oracle_gap(o: &OracleSuite, q: f64, root: &RngStream) -> Result<f64, CliError> {
    let grid = TimeGrid::uniform(o.steps)?;
    let fp = FixedPointConfig::new(o.iterations, Aggregation::Last);
    let mut worst: f64 = 0.0;
    for k in 0..o.fields {
        let mut rng = root.substream(k as u64);
        let field = LinearField::random_contraction(o.dim, grid.sigmas().to_vec(), q, &mut rng)?;
        let x1 = rng.gaussian(&[o.samples, o.dim])?;
        let inv = invert(&field, &x1, &grid, None, &fp)?;
        let exact = exact_linear_invert(&field, &x1, &grid)?;
        worst = worst.max(inv.noise_latent().sub(&exact)?.norm_inf());
    }
    Ok(worst)
}

fn oracle_suite(cfg: &BenchConfig, report: &mut Report) -> Result<(), CliError> {
    let o = &cfg.oracle;
    let root = RngStream::new(cfg.seed).substream(1);
    let gap = oracle_gap(o, o.contraction, &root)?;
    report.metric("oracle_contraction", o.contraction, "factor");
    report.metric("oracle_max_gap", gap, "linf");
    if let Some(q) = o.report_contraction {
        report.metric("oracle_report_contraction", q, "factor");
        report.metric("oracle_report_max_gap", oracle_gap(o, q, &root)?, "linf");
    }
    report.check("linear_oracle_match", gap <= o.tolerance, || {
        format!("terminal gap {gap:e} exceeds {:e} at contraction {}", o.tolerance, o.contraction)
    });
    Ok(())
}

fn gradient_suite(cfg: &BenchConfig, report: &mut Report) -> Result<(), CliError> {
    let g = &cfg.gradient;
    let cases = [
        ("mlp", Architecture::Mlp(MlpArch::default()), DatasetSpec::gaussian_2d()),
        ("mini_dit", Architecture::MiniDit(DitArch::default()), DatasetSpec::two_factor()),
    ];
    for (name, arch, spec) in cases {
        let data = make_dataset(spec, cfg.seed)?;
        let mut worst: f64 = 0.0;
        for &point in &g.points {
            worst = worst.max(check_rf_gradient(&arch, &data, point, g.batch_size)?.max_relative_error);
        }
        report.metric(format!("grad_max_rel_err[{name}]"), worst, "relative");
        report.check("gradient_check", worst <= g.tolerance, || {
            format!("{name}: max relative error {worst:e} exceeds {:e}", g.tolerance)
        });
    }
    Ok(())
}

fn s_sweep_suite(cfg: &BenchConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let s = &cfg.s_sweep;
    let path = s.checkpoint.as_deref().unwrap_or_default();
    let ck = load_checkpoint(path)?;
    let model = ck.model()?;
    let model = model.as_dit().ok_or_else(|| CliError::usage(format!("{path} is not a mini-DiT checkpoint")))?;
    let settings = EditSettings {
        grid: TimeGrid::uniform(s.steps)?,
        fixed_point: s.fixed_point,
        w_inv: s.w_inv,
        w_edit: s.w_edit,
        options: s.options.clone(),
    };
    let mut w = csv::Writer::from_writer(dir.artifact("s_sweep.csv")?);
    w.write_record([
        "s_fraction",
        "median_preservation_error",
        "mean_attainment_rate",
        "median_displacement_from_previous",
    ])?;
    let mut previous: Option<Vec<EditTrial>> = None;
    for &frac in &s.s_fractions {
        let plan =
            TrialPlan { seeds: s.seeds, samples: s.samples, root_seed: s.root_seed, s_fraction: frac, injection: None };
        let trials = factor_b_trials(model, &ck.meta.dataset, &plan, &settings)?;
        let summary = TrialSummary::of(&trials)?;
        let moved = match &previous {
            Some(prev) => median(&output_displacements(prev, &trials)?),
            None => f64::NAN,
        };
        w.write_record([
            frac.to_string(),
            summary.median_preservation_error.to_string(),
            summary.mean_attainment_rate.to_string(),
            moved.to_string(),
        ])?;
        report.metric(format!("s_sweep_preservation_error@{frac}"), summary.median_preservation_error, "l2");
        report.metric(format!("s_sweep_attainment_rate@{frac}"), summary.mean_attainment_rate, "fraction");
        if previous.is_some() {
            report.metric(format!("s_sweep_displacement_to@{frac}"), moved, "l2");
        }
        previous = Some(trials);
    }
    w.flush()?;
    Ok(())
}
