//! Seeded factor-B edits on the two-factor dataset.

use serde::Serialize;

use super::{edit_pipeline, factor_metrics, AttentionInjection, EditSettings, EditSpec, MiniDiT};
use crate::error::{FlowError, Result};
use crate::numerics::{median, RngStream, Tensor};
use crate::training::{make_dataset, two_factor_prompt, DatasetSpec};

/// One seeded edit: source prompt `(a, b)`, target prompt `(a, 1 - b)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditTrial {
    pub seed: u64,
    pub source: [usize; 2],
    pub target: [usize; 2],
    pub preservation_error: f64,
    pub attainment_rate: f64,
    pub recon_rel_err: f64,
    #[serde(skip)]
    pub input: Tensor,
    #[serde(skip)]
    pub edited: Tensor,
}

/// Medians over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub median_preservation_error: f64,
    pub median_attainment_rate: f64,
    pub mean_attainment_rate: f64,
    pub max_recon_rel_err: f64,
}

impl TrialSummary {
    pub fn of(trials: &[EditTrial]) -> Result<Self> {
        if trials.is_empty() {
            return Err(FlowError::invalid("no edit trials to summarise"));
        }
        let pres: Vec<f64> = trials.iter().map(|t| t.preservation_error).collect();
        let att: Vec<f64> = trials.iter().map(|t| t.attainment_rate).collect();
        Ok(Self {
            trials: trials.len(),
            median_preservation_error: median(&pres),
            median_attainment_rate: median(&att),
            mean_attainment_rate: att.iter().sum::<f64>() / att.len() as f64,
            max_recon_rel_err: trials.iter().map(|t| t.recon_rel_err).fold(0.0, f64::max),
        })
    }
}

/// Seeds, batch size and invariance controls of a trial run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPlan {
    pub seeds: usize,
    pub samples: usize,
    pub root_seed: u64,
    pub s_fraction: f64,
    pub injection: Option<AttentionInjection>,
}

/// Edits factor B of `plan.samples` points per seed. Seed `k` uses substream `k` of
/// the root stream for the source prompt and the dataset seed, so trials are
/// reproducible one by one.
pub fn factor_b_trials(
    model: &MiniDiT,
    data: &DatasetSpec,
    plan: &TrialPlan,
    settings: &EditSettings,
) -> Result<Vec<EditTrial>> {
    let DatasetSpec::TwoFactor { means_a, means_b, .. } = data else {
        return Err(FlowError::Capability("factor edits need the two_factor dataset".into()));
    };
    if plan.samples == 0 {
        return Err(FlowError::invalid("each trial needs at least one sample"));
    }
    let means = [*means_a, *means_b];
    let root = RngStream::new(plan.root_seed);
    (0..plan.seeds as u64)
        .map(|seed| {
            let mut rng = root.substream(seed);
            let (a, b) = (rng.below(2), rng.below(2));
            let source = two_factor_prompt(a, b);
            let mut ds = make_dataset(data.clone(), rng.next_u64())?;
            let input = ds.sample_prompt(&source, plan.samples)?;
            let spec = EditSpec::new(source, two_factor_prompt(a, 1 - b), plan.s_fraction, plan.injection.clone())?;
            let out = edit_pipeline(model, &input, &spec, settings)?;
            let m = factor_metrics(&input, &out.edited, &spec, &means)?;
            Ok(EditTrial {
                seed,
                source: [a, b],
                target: [a, 1 - b],
                preservation_error: m.preservation_error,
                attainment_rate: m.attainment_rate,
                recon_rel_err: out.metrics.recon_rel_err,
                input,
                edited: out.edited,
            })
        })
        .collect()
}

/// Per-seed mean L2 distance between the edited outputs of two matched trial runs.
pub fn output_displacements(a: &[EditTrial], b: &[EditTrial]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(FlowError::invalid("trial runs differ in length"));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.seed != y.seed || x.input != y.input {
                return Err(FlowError::invalid(format!("trial {} is not matched across runs", x.seed)));
            }
            let diff = x.edited.sub(&y.edited)?;
            Ok(diff.mean_row_norm())
        })
        .collect()
}
