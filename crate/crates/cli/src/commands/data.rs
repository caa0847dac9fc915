use flowinv_core::training::{make_dataset, DatasetSpec};
use serde::{Deserialize, Serialize};

use super::{positive, write_samples};
use crate::config::CommandConfig;
use crate::error::CliError;
use crate::run::{Report, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub dataset: DatasetSpec,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { dataset: DatasetSpec::gaussian_2d(), samples: 1000, seed: 1 }
    }
}

impl CommandConfig for GenDataConfig {
    fn validate(&self) -> Result<(), CliError> {
        positive("samples", self.samples)?;
        Ok(self.dataset.validate()?)
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

pub(super) fn gen_data(cfg: &GenDataConfig, dir: &mut RunDir, report: &mut Report) -> Result<(), CliError> {
    let mut ds = make_dataset(cfg.dataset.clone(), cfg.seed)?;
    let s = ds.sample(cfg.samples)?;
    write_samples(dir, "samples.csv", &s.x, s.prompts.as_deref())?;
    report.metric("samples", cfg.samples as f64, "count");
    report.metric("dim", s.x.cols() as f64, "count");
    let means = s.x.column_means();
    for (k, m) in means.iter().enumerate() {
        let var = s.x.row_iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / s.x.rows() as f64;
        report.metric(format!("mean_x{k}"), *m, "value");
        report.metric(format!("std_x{k}"), var.sqrt(), "value");
    }
    Ok(())
}
