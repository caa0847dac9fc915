use flowinv_core::editing::DitArch;
use flowinv_core::numerics::RngStream;
use flowinv_core::training::{
    check_rf_gradient, make_dataset, rf_loss, train_field, Architecture, Batch, DatasetSpec, MlpArch, Model,
    OptimizerKind, TrainConfig, TrainableField,
};
use flowinv_core::FlowError;

fn small_mlp() -> Architecture {
    Architecture::Mlp(MlpArch { hidden: 16, ..MlpArch::default() })
}

fn small_dit() -> Architecture {
    Architecture::MiniDit(DitArch { width: 8, ff: 12, ..DitArch::default() })
}

fn quick(steps: usize, lr: f64, optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig { batch_size: 16, steps, learning_rate: lr, optimizer, seed: 3, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    for (arch, spec) in [(small_mlp(), DatasetSpec::gaussian_2d()), (small_dit(), DatasetSpec::two_factor())] {
        let data = make_dataset(spec, 4).unwrap();
        for opt in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            let cfg = quick(25, 0.0, opt);
            let out = train_field(&arch, &cfg, &data).unwrap();
            let init = Model::init(&arch, &mut RngStream::new(cfg.seed).substream(0)).unwrap();
            assert_eq!(out.checkpoint.params, init.params().to_vec());

            // Every logged loss is the loss of the unchanged initial model on that step's batch.
            let mut replay_data = data.clone();
            let mut rng = RngStream::new(cfg.seed).substream(1);
            for &logged in &out.loss_curve {
                let batch = Batch::draw(&mut replay_data, &mut rng, cfg.batch_size, cfg.cond_dropout).unwrap();
                assert_eq!(rf_loss(&init, &batch).unwrap().0.to_bits(), logged.to_bits());
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    for (arch, spec) in [(small_mlp(), DatasetSpec::gmm2d()), (small_dit(), DatasetSpec::two_factor())] {
        let data = make_dataset(spec, 8).unwrap();
        let cfg = quick(40, 1e-3, OptimizerKind::Adam);
        let a = train_field(&arch, &cfg, &data).unwrap();
        let b = train_field(&arch, &cfg, &data).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let c = train_field(&arch, &TrainConfig { seed: 4, ..cfg }, &data).unwrap();
        assert_ne!(a.checkpoint.params, c.checkpoint.params);
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = make_dataset(DatasetSpec::gaussian_2d(), 1).unwrap();
    let cfg = TrainConfig { batch_size: 64, steps: 600, seed: 1, ..TrainConfig::default() };
    let out = train_field(&small_mlp(), &cfg, &data).unwrap();
    let head: f64 = out.loss_curve[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = out.loss_curve[550..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert_eq!(out.loss_curve.len(), 600);
    assert_eq!(out.checkpoint.meta.final_loss, out.loss_curve[500..].iter().sum::<f64>() / 100.0);
}

#[test]
fn exploding_learning_rate_reports_the_step() {
    let data = make_dataset(DatasetSpec::Gaussian { mean: vec![50.0, -50.0], std: 1.0 }, 1).unwrap();
    let cfg = quick(200, 1e3, OptimizerKind::Sgd);
    let err = train_field(&small_mlp(), &cfg, &data).unwrap_err();
    assert!(matches!(err, FlowError::Numerical(_)));
    assert!(err.to_string().contains("training diverged at step"), "{err}");
}

#[test]
fn dimension_mismatch_rejected() {
    let data = make_dataset(DatasetSpec::two_factor(), 1).unwrap();
    assert!(matches!(
        train_field(&small_mlp(), &quick(5, 1e-3, OptimizerKind::Adam), &data).unwrap_err(),
        FlowError::Configuration(_)
    ));
}

#[test]
fn default_architectures_pass_gradient_check() {
    let cases = [
        (Architecture::Mlp(MlpArch::default()), DatasetSpec::gaussian_2d()),
        (Architecture::MiniDit(DitArch::default()), DatasetSpec::two_factor()),
    ];
    for (arch, spec) in cases {
        let data = make_dataset(spec, 2).unwrap();
        for seed in 0..3 {
            let report = check_rf_gradient(&arch, &data, seed, 4).unwrap();
            assert!(report.max_relative_error <= 1e-4, "{arch:?} seed {seed}: {}", report.max_relative_error);
        }
    }
}
