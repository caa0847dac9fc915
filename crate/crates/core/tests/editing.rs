use std::sync::OnceLock;

use flowinv_core::editing::{
    factor_b_trials, output_displacements, AttentionInjection, DitArch, EditOptions, EditSettings, EditTrial, MiniDiT,
    QkvComponent, TrialPlan, TrialSummary,
};
use flowinv_core::inversion::FixedPointConfig;
use flowinv_core::numerics::median;
use flowinv_core::samplers::TimeGrid;
use flowinv_core::training::{make_dataset, train_field, Architecture, DatasetSpec, LrSchedule, TrainConfig};
use flowinv_core::FlowError;

fn model() -> &'static MiniDiT {
    static MODEL: OnceLock<MiniDiT> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = make_dataset(DatasetSpec::two_factor(), 1).unwrap();
        let cfg =
            TrainConfig { batch_size: 64, steps: 3000, lr_schedule: LrSchedule::Cosine, ..TrainConfig::default() };
        let out = train_field(&Architecture::MiniDit(DitArch::default()), &cfg, &data).unwrap();
        out.checkpoint.model().unwrap().as_dit().cloned().unwrap()
    })
}

fn settings() -> EditSettings {
    EditSettings {
        grid: TimeGrid::uniform(30).unwrap(),
        fixed_point: FixedPointConfig::default(),
        w_inv: 1.0,
        w_edit: 2.0,
        options: EditOptions::default(),
    }
}

fn trials(s_fraction: f64, injection: Option<AttentionInjection>) -> Vec<EditTrial> {
    let plan = TrialPlan { seeds: 16, samples: 2, root_seed: 7, s_fraction, injection };
    factor_b_trials(model(), &DatasetSpec::two_factor(), &plan, &settings()).unwrap()
}

#[test]
fn trained_edits_reach_the_target_and_replay_the_source() {
    let summary = TrialSummary::of(&trials(0.6, None)).unwrap();
    assert!(summary.mean_attainment_rate >= 0.9, "{summary:?}");
    assert!(summary.max_recon_rel_err <= 1e-8, "{summary:?}");
    assert!(summary.median_preservation_error < 0.1, "{summary:?}");
}

#[test]
fn map_fraction_moves_edits_far_less_than_the_edit_itself() {
    let base = trials(0.0, None);
    let magnitude = median(&base.iter().map(|t| t.edited.sub(&t.input).unwrap().mean_row_norm()).collect::<Vec<_>>());
    assert!(magnitude > 1.0, "{magnitude}");
    for s in [0.6, 0.9] {
        let moved = median(&output_displacements(&base, &trials(s, None)).unwrap());
        assert!(moved < 0.01 * magnitude, "S={s}: {moved} vs edit {magnitude}");
    }
}

#[test]
fn full_value_injection_suppresses_the_edit() {
    let free = TrialSummary::of(&trials(0.0, None)).unwrap();
    let inj = AttentionInjection { components: vec![QkvComponent::V], fraction: 1.0 };
    let held = TrialSummary::of(&trials(0.0, Some(inj))).unwrap();
    assert!(held.mean_attainment_rate < free.mean_attainment_rate, "{held:?} vs {free:?}");
    assert!(held.median_preservation_error < free.median_preservation_error, "{held:?} vs {free:?}");
}

#[test]
fn factor_trials_need_the_two_factor_dataset() {
    let plan = TrialPlan { seeds: 1, samples: 1, root_seed: 0, s_fraction: 0.0, injection: None };
    let err = factor_b_trials(model(), &DatasetSpec::gaussian_2d(), &plan, &settings()).unwrap_err();
    assert!(matches!(err, FlowError::Capability(_)), "{err}");
}
