use std::io::Write;

use flowinv_core::editing::{
    edit_pipeline, factor_b_trials, factor_metrics, output_displacements, AttentionInjection, EditOptions,
    EditSettings, EditSpec, EditTrial, MiniDiT, QkvComponent, TrialPlan, TrialSummary,
};
use flowinv_core::inversion::FixedPointConfig;
use flowinv_core::numerics::{median, RngStream};
use flowinv_core::samplers::TimeGrid;
use flowinv_core::training::{make_dataset, Checkpoint, DatasetSpec};
use serde::{Deserialize, Serialize};

use super::{finite, fraction, load_checkpoint, positive, read_input, write_samples};
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

pub const TRIALS_HEADER: [&str; 9] = [
    "s_fraction",
    "seed",
    "source_a",
    "source_b",
    "target_b",
    "preservation_error",
    "attainment_rate",
    "recon_rel_err",
    "displacement_from_baseline",
];

pub const SWEEP_HEADER: [&str; 6] = [
    "tau",
    "median_preservation_error",
    "median_attainment_rate",
    "mean_attainment_rate",
    "max_recon_rel_err",
    "trials",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub checkpoint: String,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Samples CSV to edit; drawn from the checkpoint's dataset under `source` when absent.
    pub input: Option<String>,
    pub samples: usize,
    pub seed: u64,
    /// When positive, runs seeded factor-B edits instead of a single `source -> target` edit,
    /// each with a baseline run at `baseline_s_fraction`.
    pub seeds: usize,
    pub baseline_s_fraction: f64,
    pub steps: usize,
    pub fixed_point: FixedPointConfig,
    pub w_inv: f64,
    pub w_edit: f64,
    pub s_fraction: f64,
    pub injection: Option<AttentionInjection>,
    pub options: EditOptions,
    /// Writes the source-branch feature caches of a single edit to `cache.bin`.
    pub cache_dump: bool,
    pub max_recon_rel_err: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            source: vec![1, 3],
            target: vec![1, 4],
            input: None,
            samples: 8,
            seed: 0,
            seeds: 0,
            baseline_s_fraction: 0.0,
            steps: 30,
            fixed_point: FixedPointConfig::default(),
            w_inv: 1.0,
            w_edit: 2.0,
            s_fraction: 0.6,
            injection: None,
            options: EditOptions::default(),
            cache_dump: false,
            max_recon_rel_err: 1e-8,
        }
    }
}

impl CommandConfig for EditConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.checkpoint.is_empty() {
            return Err(CliError::usage("edit needs a `checkpoint`"));
        }
        positive("samples", self.samples)?;
        positive("steps", self.steps)?;
        finite("w_inv", self.w_inv)?;
        finite("w_edit", self.w_edit)?;
        fraction("s_fraction", self.s_fraction)?;
        fraction("baseline_s_fraction", self.baseline_s_fraction)?;
        if let Some(inj) = &self.injection {
            fraction("injection.fraction", inj.fraction)?;
        }
        if self.source.len() != self.target.len() {
            return Err(CliError::usage("source and target prompts differ in length"));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub checkpoint: String,
    /// Injection fractions τ.
    pub taus: Vec<f64>,
    pub components: Vec<QkvComponent>,
    pub s_fraction: f64,
    pub seeds: usize,
    pub samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub fixed_point: FixedPointConfig,
    pub w_inv: f64,
    pub w_edit: f64,
    pub options: EditOptions,
    pub max_recon_rel_err: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            taus: vec![0.0, 0.2, 0.5, 1.0],
            components: vec![QkvComponent::V],
            s_fraction: 0.0,
            seeds: 32,
            samples: 4,
            seed: 7,
            steps: 30,
            fixed_point: FixedPointConfig::default(),
            w_inv: 1.0,
            w_edit: 2.0,
            options: EditOptions::default(),
            max_recon_rel_err: 1e-8,
        }
    }
}

impl CommandConfig for SweepConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.checkpoint.is_empty() {
            return Err(CliError::usage("sweep-attn needs a `checkpoint`"));
        }
        if self.taus.is_empty() || self.components.is_empty() {
            return Err(CliError::usage("taus and components must be non-empty"));
        }
        for tau in &self.taus {
            fraction("tau", *tau)?;
        }
        fraction("s_fraction", self.s_fraction)?;
        positive("seeds", self.seeds)?;
        positive("samples", self.samples)?;
        positive("steps", self.steps)?;
        finite("w_inv", self.w_inv)?;
        finite("w_edit", self.w_edit)
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

fn load_dit(path: &str) -> Result<(Checkpoint, MiniDiT), CliError> {
    let ck = load_checkpoint(path)?;
    let model =
        ck.model()?.as_dit().cloned().ok_or_else(|| CliError::usage(format!("{path} is not a mini-DiT checkpoint")))?;
    Ok((ck, model))
}

fn factor_means(spec: &DatasetSpec) -> Option<[[[f64; 2]; 2]; 2]> {
    match spec {
        DatasetSpec::TwoFactor { means_a, means_b, .. } => Some([*means_a, *means_b]),
        _ => None,
    }
}

pub(super) fn edit(cfg: &EditConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let (ck, model) = load_dit(&cfg.checkpoint)?;
    let settings = EditSettings {
        grid: TimeGrid::uniform(cfg.steps)?,
        fixed_point: cfg.fixed_point,
        w_inv: cfg.w_inv,
        w_edit: cfg.w_edit,
        options: cfg.options.clone(),
    };
    if cfg.seeds > 0 {
        return edit_trials(cfg, &model, &ck.meta.dataset, &settings, dir, report);
    }
    let x1 = match &cfg.input {
        Some(path) => read_input(path)?.0,
        None => {
            let mut ds = make_dataset(ck.meta.dataset.clone(), RngStream::new(cfg.seed).next_u64())?;
            ds.sample_prompt(&cfg.source, cfg.samples)?
        }
    };
    let spec = EditSpec::new(cfg.source.clone(), cfg.target.clone(), cfg.s_fraction, cfg.injection.clone())?;
    let out = edit_pipeline(&model, &x1, &spec, &settings)?;
    let n = x1.rows();
    write_samples(dir, "input.csv", &x1, Some(&vec![cfg.source.clone(); n]))?;
    write_samples(dir, "edited.csv", &out.edited, Some(&vec![cfg.target.clone(); n]))?;
    write_samples(dir, "reconstruction.csv", &out.reconstruction, Some(&vec![cfg.source.clone(); n]))?;
    if cfg.cache_dump {
        let mut f = dir.artifact("cache.bin")?;
        out.state.write_cache_dump(&mut f, model.arch())?;
        f.flush()?;
    }
    let m = &out.metrics;
    report.metric("samples", n as f64, "count");
    report.metric("map_steps", m.map_steps as f64, "count");
    report.metric("injection_steps", m.injection_steps as f64, "count");
    report.metric("recon_rel_err", m.recon_rel_err, "relative_linf");
    report.metric("mean_displacement", out.edited.sub(&x1)?.mean_row_norm(), "l2");
    if let Some(means) = factor_means(&ck.meta.dataset) {
        let f = factor_metrics(&x1, &out.edited, &spec, &means)?;
        report.metric("preservation_error", f.preservation_error, "l2");
        report.metric("attainment_rate", f.attainment_rate, "fraction");
    }
    check_recon(report, m.recon_rel_err, cfg.max_recon_rel_err);
    Ok(())
}

fn check_recon(report: &mut Report, err: f64, bound: f64) {
    report.check("source_branch_reconstruction", err <= bound, || format!("relative error {err:e} exceeds {bound:e}"));
}

fn edit_trials(
    cfg: &EditConfig,
    model: &MiniDiT,
    data: &DatasetSpec,
    settings: &EditSettings,
    dir: &mut RunDir,
    report: &mut Report,
) -> Result<(), CliError> {
    let plan = |s_fraction| TrialPlan {
        seeds: cfg.seeds,
        samples: cfg.samples,
        root_seed: cfg.seed,
        s_fraction,
        injection: cfg.injection.clone(),
    };
    let main = factor_b_trials(model, data, &plan(cfg.s_fraction), settings)?;
    let baseline = factor_b_trials(model, data, &plan(cfg.baseline_s_fraction), settings)?;
    let displacement = output_displacements(&main, &baseline)?;
    let mut w = csv::Writer::from_writer(dir.artifact("trials.csv")?);
    w.write_record(TRIALS_HEADER)?;
    for (s, trials) in [(cfg.s_fraction, &main), (cfg.baseline_s_fraction, &baseline)] {
        for (t, d) in trials.iter().zip(&displacement) {
            w.write_record(trial_record(s, t, *d))?;
        }
    }
    w.flush()?;

    let a = TrialSummary::of(&main)?;
    let b = TrialSummary::of(&baseline)?;
    report.metric("trials", a.trials as f64, "count");
    report.metric("median_preservation_error", a.median_preservation_error, "l2");
    report.metric("baseline_median_preservation_error", b.median_preservation_error, "l2");
    report.metric("preservation_ratio", a.median_preservation_error / b.median_preservation_error, "ratio");
    report.metric("median_attainment_rate", a.median_attainment_rate, "fraction");
    report.metric("mean_attainment_rate", a.mean_attainment_rate, "fraction");
    report.metric("baseline_mean_attainment_rate", b.mean_attainment_rate, "fraction");
    report.metric("median_displacement_from_baseline", median(&displacement), "l2");
    let recon = a.max_recon_rel_err.max(b.max_recon_rel_err);
    report.metric("max_recon_rel_err", recon, "relative_linf");
    check_recon(report, recon, cfg.max_recon_rel_err);
    Ok(())
}

fn trial_record(s_fraction: f64, t: &EditTrial, displacement: f64) -> [String; 9] {
    [
        s_fraction.to_string(),
        t.seed.to_string(),
        t.source[0].to_string(),
        t.source[1].to_string(),
        t.target[1].to_string(),
        t.preservation_error.to_string(),
        t.attainment_rate.to_string(),
        t.recon_rel_err.to_string(),
        displacement.to_string(),
    ]
}

pub(super) fn sweep_attn(cfg: &SweepConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let (ck, model) = load_dit(&cfg.checkpoint)?;
    let settings = EditSettings {
        grid: TimeGrid::uniform(cfg.steps)?,
        fixed_point: cfg.fixed_point,
        w_inv: cfg.w_inv,
        w_edit: cfg.w_edit,
        options: cfg.options.clone(),
    };
    let mut w = csv::Writer::from_writer(dir.artifact("sweep.csv")?);
    w.write_record(SWEEP_HEADER)?;
    let mut recon: f64 = 0.0;
    for &tau in &cfg.taus {
        let plan = TrialPlan {
            seeds: cfg.seeds,
            samples: cfg.samples,
            root_seed: cfg.seed,
            s_fraction: cfg.s_fraction,
            injection: Some(AttentionInjection { components: cfg.components.clone(), fraction: tau }),
        };
        let s = TrialSummary::of(&factor_b_trials(&model, &ck.meta.dataset, &plan, &settings)?)?;
        w.write_record([
            tau.to_string(),
            s.median_preservation_error.to_string(),
            s.median_attainment_rate.to_string(),
            s.mean_attainment_rate.to_string(),
            s.max_recon_rel_err.to_string(),
            s.trials.to_string(),
        ])?;
        report.metric(format!("median_preservation_error@{tau}"), s.median_preservation_error, "l2");
        report.metric(format!("median_attainment_rate@{tau}"), s.median_attainment_rate, "fraction");
        report.metric(format!("mean_attainment_rate@{tau}"), s.mean_attainment_rate, "fraction");
        recon = recon.max(s.max_recon_rel_err);
    }
    w.flush()?;
    report.metric("max_recon_rel_err", recon, "relative_linf");
    check_recon(report, recon, cfg.max_recon_rel_err);
    Ok(())
}
