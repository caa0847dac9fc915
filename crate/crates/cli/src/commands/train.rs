use flowinv_core::editing::DitArch;
use flowinv_core::fields::{Condition, VelocityField};
use flowinv_core::io::write_loss_curve_csv;
use flowinv_core::numerics::{energy_distance, RngStream, Tensor};
use flowinv_core::samplers::{sample_ode, TimeGrid};
use flowinv_core::training::{
    make_dataset, train_field, two_factor_prompt, Architecture, DatasetSpec, MlpArch, TrainConfig,
};
use serde::{Deserialize, Serialize};

use super::{finite, positive, write_samples};
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

/// Sample-quality evaluation after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples; split evenly across prompts for conditional data.
    pub samples: usize,
    /// Euler steps of the sampler.
    pub steps: usize,
    pub seed: u64,
    /// Guidance weight for conditional sampling.
    pub guidance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 10_000, steps: 30, seed: 99, guidance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub dataset: DatasetSpec,
    pub dataset_seed: u64,
    /// Defaults to the MLP for unconditional data and the mini-DiT for two-factor data.
    pub arch: Option<Architecture>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::gaussian_2d(),
            dataset_seed: 1,
            arch: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn architecture(&self) -> Architecture {
        self.arch.clone().unwrap_or_else(|| match self.dataset {
            DatasetSpec::TwoFactor { .. } => Architecture::MiniDit(DitArch::default()),
            _ => Architecture::Mlp(MlpArch { dim: self.dataset.dim(), ..MlpArch::default() }),
        })
    }
}

impl CommandConfig for TrainRunConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        positive("eval.samples", self.eval.samples)?;
        positive("eval.steps", self.eval.steps)?;
        finite("eval.guidance", self.eval.guidance)?;
        match self.architecture() {
            Architecture::Mlp(a) => a.validate()?,
            Architecture::MiniDit(a) => a.validate()?,
        }
        if self.architecture().data_dim() != self.dataset.dim() {
            return Err(CliError::usage(format!(
                "architecture dim {} does not match dataset dim {}",
                self.architecture().data_dim(),
                self.dataset.dim()
            )));
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.train.seed
    }
}

pub(super) fn train(cfg: &TrainRunConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let data = make_dataset(cfg.dataset.clone(), cfg.dataset_seed)?;
    let outcome = train_field(&cfg.architecture(), &cfg.train, &data)?;
    let ck = &outcome.checkpoint;
    let bytes = ck.to_bytes()?;
    std::io::Write::write_all(&mut dir.artifact("checkpoint.bin")?, &bytes)?;
    write_loss_curve_csv(&mut dir.artifact("loss_curve.csv")?, &outcome.loss_curve)?;
    report.metric("parameters", ck.params.len() as f64, "count");
    report.metric("steps", cfg.train.steps as f64, "count");
    report.metric("initial_loss", outcome.loss_curve[0], "loss");
    report.metric("final_loss", ck.meta.final_loss, "loss");
    report.metric("loss_threshold", ck.meta.loss_threshold, "loss");
    report.flag("loss_warning", ck.meta.loss_warning);
    if ck.meta.loss_warning {
        eprintln!("warning: final loss {} is above the threshold {}", ck.meta.final_loss, ck.meta.loss_threshold);
    }

    let model = ck.model()?;
    let grid = TimeGrid::uniform(cfg.eval.steps)?;
    let root = RngStream::new(cfg.eval.seed);
    match &cfg.dataset {
        DatasetSpec::TwoFactor { means_a, means_b, .. } => {
            let per_prompt = cfg.eval.samples.div_ceil(4);
            let mut worst: f64 = 0.0;
            let mut all = Vec::new();
            let mut prompts = Vec::new();
            for (k, (a, b)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let prompt = two_factor_prompt(a, b);
                let x0 = root.substream(k as u64).gaussian(&[per_prompt, 4])?;
                let cond = Condition::new(prompt.clone(), cfg.eval.guidance);
                let x = sample_ode(&model, &x0, &grid, Some(&cond))?.data_end().clone();
                let means = x.column_means();
                let err_a = dist(&means[0..2], &means_a[a]);
                let err_b = dist(&means[2..4], &means_b[b]);
                report.metric(format!("factor_a_mean_error[{a}{b}]"), err_a, "l2");
                report.metric(format!("factor_b_mean_error[{a}{b}]"), err_b, "l2");
                worst = worst.max(err_a).max(err_b);
                all.extend(x.row_iter().map(<[f64]>::to_vec));
                prompts.extend(std::iter::repeat_n(prompt, per_prompt));
            }
            report.metric("max_factor_mean_error", worst, "l2");
            write_samples(dir, "eval_samples.csv", &Tensor::from_rows(&all)?, Some(&prompts))?;
        }
        spec => {
            let n = cfg.eval.samples;
            let x0 = root.substream(0).gaussian(&[n, model.dim()])?;
            let x = sample_ode(&model, &x0, &grid, None)?.data_end().clone();
            let mut reference = make_dataset(spec.clone(), root.substream(1).next_u64())?;
            let target = reference.sample(n)?.x;
            report.metric("energy_distance", energy_distance(&x, &target)?, "distance");
            report.metric("mean_error", dist(&x.column_means(), &target.column_means()), "l2");
            write_samples(dir, "eval_samples.csv", &x, None)?;
        }
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}
