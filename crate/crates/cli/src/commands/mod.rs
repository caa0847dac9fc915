//! Subcommands. Each resolves its configuration, creates its run directory, computes,
//! then writes `metrics.csv` and `manifest.json`.

mod bench;
mod compare;
mod data;
mod edit;
mod inversion;
mod train;

use std::path::{Path, PathBuf};

use flowinv_core::fields::{FieldSpec, VelocityField};
use flowinv_core::io::{read_samples_csv, write_samples_csv};
use flowinv_core::numerics::Tensor;
use flowinv_core::training::{Checkpoint, DatasetSpec};
use serde::{Deserialize, Serialize};

pub use bench::{BenchConfig, Suite, ABLATION_HEADER};
pub use compare::CompareConfig;
pub use data::GenDataConfig;
pub use edit::{EditConfig, SweepConfig, SWEEP_HEADER, TRIALS_HEADER};
pub use inversion::InversionConfig;
pub use train::{EvalConfig, TrainRunConfig};

use crate::config::{config_hash, resolve, CommandConfig};
use crate::error::CliError;
use crate::run::{output_root, MetricsRow, Report, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Invert,
    Reconstruct,
    Edit,
    CompareDdim,
    SweepAttn,
    Bench,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::GenData,
        Command::Train,
        Command::Invert,
        Command::Reconstruct,
        Command::Edit,
        Command::CompareDdim,
        Command::SweepAttn,
        Command::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Edit => "edit",
            Command::CompareDdim => "compare-ddim",
            Command::SweepAttn => "sweep-attn",
            Command::Bench => "bench",
        }
    }
}

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub seeds: Option<usize>,
    pub force: bool,
}

impl Invocation {
    pub fn new(command: Command) -> Self {
        Self { command, config: None, overrides: Vec::new(), out: None, seeds: None, force: false }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
}

pub fn execute(inv: &Invocation) -> Result<RunSummary, CliError> {
    match inv.command {
        Command::GenData => run(inv, data::gen_data),
        Command::Train => run(inv, train::train),
        Command::Invert => run(inv, inversion::invert),
        Command::Reconstruct => run(inv, inversion::reconstruct),
        Command::Edit => run(inv, edit::edit),
        Command::CompareDdim => run(inv, compare::compare_ddim),
        Command::SweepAttn => run(inv, edit::sweep_attn),
        Command::Bench => run(inv, bench::bench),
    }
}

type Body<T> = fn(&T, &mut RunDir, &mut Report) -> Result<(), CliError>;

fn run<T: CommandConfig>(inv: &Invocation, body: Body<T>) -> Result<RunSummary, CliError> {
    let name = inv.command.name();
    let mut overrides = inv.overrides.clone();
    if let Some(n) = inv.seeds {
        if serde_json::to_value(T::default())?.get("seeds").is_none() {
            return Err(CliError::usage(format!("--seeds does not apply to {name}")));
        }
        overrides.push(format!("seeds={n}"));
    }
    let (cfg, value) = resolve::<T>(inv.config.as_deref(), &overrides)?;
    let hash = config_hash(name, &value);
    let mut dir = RunDir::create(&output_root(inv.out.as_deref()), name, &hash, inv.force)?;
    let mut report = Report::default();
    if let Err(e) = body(&cfg, &mut dir, &mut report) {
        let _ = std::fs::remove_dir_all(&dir.path);
        return Err(e);
    }
    dir.finish(name, &value, cfg.seed(), &report)?;
    if let Some((invariant, detail)) = report.failures.first() {
        return Err(CliError::Assertion { invariant: invariant.clone(), detail: detail.clone() });
    }
    Ok(RunSummary { run_id: dir.run_id.clone(), run_dir: dir.path.clone(), metrics: report.rows })
}

/// A velocity field given by checkpoint path or as a closed-form oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSource {
    Checkpoint(String),
    Oracle(FieldSpec),
}

pub(crate) fn load_checkpoint(path: &str) -> Result<Checkpoint, CliError> {
    if path.is_empty() {
        return Err(CliError::usage("a checkpoint path is required"));
    }
    let p = Path::new(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(p.to_path_buf()));
    }
    Ok(Checkpoint::load(p)?)
}

pub(crate) struct LoadedField {
    pub field: Box<dyn VelocityField + Send + Sync>,
    /// Dataset the field was trained on, for checkpoints.
    pub dataset: Option<DatasetSpec>,
}

impl FieldSource {
    pub(crate) fn load(&self) -> Result<LoadedField, CliError> {
        match self {
            FieldSource::Checkpoint(path) => {
                let ck = load_checkpoint(path)?;
                Ok(LoadedField { field: Box::new(ck.model()?), dataset: Some(ck.meta.dataset) })
            }
            FieldSource::Oracle(spec) => Ok(LoadedField { field: spec.build()?, dataset: None }),
        }
    }
}

type InputRows = (Tensor, Option<Vec<Vec<u32>>>);

/// Reads an input samples CSV.
pub(crate) fn read_input(path: &str) -> Result<InputRows, CliError> {
    let p = Path::new(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(p.to_path_buf()));
    }
    Ok(read_samples_csv(std::fs::File::open(p)?)?)
}

pub(crate) fn write_samples(
    dir: &mut RunDir,
    name: &str,
    x: &Tensor,
    prompts: Option<&[Vec<u32>]>,
) -> Result<(), CliError> {
    let mut f = dir.artifact(name)?;
    write_samples_csv(&mut f, x, prompts)?;
    Ok(())
}

pub(crate) fn positive(name: &str, value: usize) -> Result<(), CliError> {
    if value == 0 {
        return Err(CliError::usage(format!("{name} must be positive")));
    }
    Ok(())
}

pub(crate) fn fraction(name: &str, value: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(CliError::usage(format!("{name} {value} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn finite(name: &str, value: f64) -> Result<(), CliError> {
    if !value.is_finite() {
        return Err(CliError::usage(format!("{name} must be finite")));
    }
    Ok(())
}
