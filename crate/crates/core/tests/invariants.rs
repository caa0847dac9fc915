use flowinv_core::editing::{active_steps, adaln_map, DitArch, EditSpec, MiniDiT, TokenFeatures};
use flowinv_core::fields::{AnalyticGaussianFlow, Condition, GaussianMixtureScore, LinearField, VelocityField};
use flowinv_core::inversion::{
    compute_compensations, fixed_point_invert_step, invert, naive_invert_step, regenerate, relative_linf, Aggregation,
    FixedPointConfig,
};
use flowinv_core::numerics::{energy_distance, RngStream, Tensor};
use flowinv_core::samplers::{cfg_velocity, rescaled_ddim_check, DiffusionSchedule, TimeGrid};
use flowinv_core::training::{rf_loss, Batch, Mlp, MlpArch, TrainableField};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Constant-coefficient linear field on a uniform grid.
fn linear_field(dim: usize, steps: usize) -> impl Strategy<Value = LinearField> {
    (prop::collection::vec(-2.0..2.0f64, dim * dim), prop::collection::vec(-1.0..1.0f64, dim)).prop_map(
        move |(a, b)| {
            let nodes = TimeGrid::uniform(steps).unwrap().sigmas().to_vec();
            LinearField::constant(dim, nodes, a, b).unwrap()
        },
    )
}

fn spectral_norm(a: &[f64], dim: usize) -> f64 {
    nalgebra::DMatrix::from_row_slice(dim, dim, a).singular_values().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_iterations_equal_naive_step(x in tensor(3, 2), t in 0usize..10, mu in -3.0..3.0f64, s in 0.2..2.0f64) {
        let field = AnalyticGaussianFlow::new(vec![mu, -mu], s).unwrap();
        let grid = TimeGrid::uniform(10).unwrap();
        let naive = naive_invert_step(&field, &x, t, &grid, None).unwrap();
        for agg in [Aggregation::Average, Aggregation::Last] {
            let (fp, _) = fixed_point_invert_step(&field, &x, t, &grid, None, &FixedPointConfig::new(0, agg)).unwrap();
            prop_assert_eq!(&fp, &naive);
        }
    }

    #[test]
    fn compensations_close_every_step(field in linear_field(2, 8), x1 in tensor(4, 2), iters in 0usize..4) {
        let grid = TimeGrid::uniform(8).unwrap();
        let inv = invert(&field, &x1, &grid, None, &FixedPointConfig::new(iters, Aggregation::Average)).unwrap();
        let inv = compute_compensations(&field, &inv, None).unwrap();
        let states = &inv.trajectory.states;
        for t in 0..8 {
            let v = field.velocity(&states[t], grid.sigma(t), None).unwrap();
            let predicted = states[t].axpy(grid.sigma(t + 1) - grid.sigma(t), &v).unwrap();
            let residual = states[t + 1].sub(&predicted).unwrap().sub(&inv.compensations[t]).unwrap();
            prop_assert!(residual.norm_inf() <= 1e-12);
        }
        let replay = regenerate(&field, &inv, None, true).unwrap();
        prop_assert!(relative_linf(replay.data_end(), &x1).unwrap() <= 1e-8);
    }

    #[test]
    fn compensated_reconstruction_on_analytic_flow(x1 in tensor(4, 2), mu in -3.0..3.0f64, s in 0.2..2.0f64, steps in 2usize..40) {
        let field = AnalyticGaussianFlow::new(vec![mu, 0.5 * mu], s).unwrap();
        let grid = TimeGrid::uniform(steps).unwrap();
        let inv = compute_compensations(&field, &invert(&field, &x1, &grid, None, &FixedPointConfig::default()).unwrap(), None).unwrap();
        let replay = regenerate(&field, &inv, None, true).unwrap();
        prop_assert!(relative_linf(replay.data_end(), &x1).unwrap() <= 1e-8);
    }

    #[test]
    fn iterate_distances_contract(a in prop::collection::vec(-3.0..3.0f64, 9), x in tensor(1, 3), t in 0usize..10) {
        let norm = spectral_norm(&a, 3);
        prop_assume!(norm > 1e-6);
        let grid = TimeGrid::uniform(10).unwrap();
        let a: Vec<f64> = a.iter().map(|v| v * 0.5 / norm * 10.0).collect();
        let nodes = grid.sigmas().to_vec();
        let field = LinearField::constant(3, nodes, a.clone(), vec![0.1, -0.2, 0.3]).unwrap();
        let q = 0.1 * spectral_norm(&a, 3);
        let (_, diag) = fixed_point_invert_step(&field, &x, t, &grid, None, &FixedPointConfig::new(8, Aggregation::Last)).unwrap();
        for w in diag.iterate_distances.windows(2) {
            prop_assert!(w[1] <= (q + 0.05) * w[0] + 1e-15, "{:?} with q {}", diag.iterate_distances, q);
        }
    }

    #[test]
    fn guidance_is_affine_in_weight(x in tensor(2, 4), sigma in 0.0..=1.0f64, w1 in -3.0..3.0f64, w2 in -3.0..3.0f64, seed in 0u64..1000) {
        let arch = DitArch { width: 6, ff: 8, blocks: 1, ..DitArch::default() };
        let base = MiniDiT::new(arch, &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed + 1);
        let n = base.params().len();
        let model = MiniDiT::from_params(arch, (0..n).map(|_| 0.3 * rng.normal()).collect()).unwrap();
        let tokens = [2u32, 3];
        let v = |w: f64| cfg_velocity(&model, &x, sigma, &tokens, w).unwrap();
        let lhs = v(w1).add(&v(w2)).unwrap();
        let rhs = v(w1 + w2).add(&v(0.0)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().norm_inf() <= 1e-12 * (1.0 + lhs.norm_inf()));
    }

    #[test]
    fn map_rows_come_from_the_right_side(
        src in tensor(4, 3),
        tgt in tensor(4, 3),
        s in 0.0..=1.0f64,
        step in 0usize..30,
        edited in prop::collection::vec(any::<bool>(), 4),
    ) {
        let source: Vec<u32> = vec![1, 3, 1, 3];
        let target: Vec<u32> = source.iter().zip(&edited).map(|(t, e)| if *e { t + 1 } else { *t }).collect();
        let spec = EditSpec::new(source.clone(), target.clone(), s, None).unwrap();
        let ms = TokenFeatures::new(src.clone(), source).unwrap();
        let mt = TokenFeatures::new(tgt.clone(), target).unwrap();
        let out = adaln_map(&ms, &mt, &spec, step, 30).unwrap();
        let active = step < active_steps(s, 30);
        for (k, &is_edited) in edited.iter().enumerate().take(4) {
            let expect = if active && !is_edited { src.row(k) } else { tgt.row(k) };
            prop_assert_eq!(out.matrix.row(k), expect);
        }
    }

    #[test]
    fn active_step_count_is_floor(k in 0usize..=50, total in 1usize..=50, f in 0.0..=1.0f64) {
        let k = k.min(total);
        prop_assert_eq!(active_steps(k as f64 / total as f64, total), k);
        let exact = f * total as f64;
        if (exact - exact.round()).abs() > 1e-6 {
            prop_assert_eq!(active_steps(f, total), exact.floor() as usize);
        }
    }

    #[test]
    fn energy_distance_is_symmetric(a in tensor(7, 2), b in tensor(5, 2)) {
        prop_assert_eq!(energy_distance(&a, &b).unwrap().to_bits(), energy_distance(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn rescaled_ddim_identity_holds(x in tensor(3, 2), t in 0usize..50) {
        let score = GaussianMixtureScore::new(vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![2.0, 0.0]], vec![vec![0.2, 0.3], vec![0.5, 0.1]]).unwrap();
        let schedule = DiffusionSchedule::cosine(50).unwrap();
        prop_assert!(rescaled_ddim_check(&score, &x, t, &schedule).unwrap() <= 1e-10);
    }

    #[test]
    fn rf_loss_is_nonnegative(x0 in tensor(6, 2), x1 in tensor(6, 2), sigmas in prop::collection::vec(0.0..=1.0f64, 6), seed in 0u64..100) {
        let model = Mlp::new(MlpArch { hidden: 8, ..MlpArch::default() }, &mut RngStream::new(seed)).unwrap();
        let batch = Batch { x0, x1, sigmas, prompts: None };
        let (loss, grad) = rf_loss(&model, &batch).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn conditional_inversion_replays_exactly(x1 in tensor(2, 4), seed in 0u64..100, w in 0.0..3.0f64) {
        let arch = DitArch { width: 6, ff: 8, ..DitArch::default() };
        let base = MiniDiT::new(arch, &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed + 1);
        let n = base.params().len();
        let model = MiniDiT::from_params(arch, (0..n).map(|_| 0.2 * rng.normal()).collect()).unwrap();
        let grid = TimeGrid::uniform(10).unwrap();
        let cond = Condition::new(vec![1, 4], w);
        let inv = invert(&model, &x1, &grid, Some(&cond), &FixedPointConfig::default()).unwrap();
        let inv = compute_compensations(&model, &inv, Some(&cond)).unwrap();
        let replay = regenerate(&model, &inv, Some(&cond), true).unwrap();
        prop_assert!(relative_linf(replay.data_end(), &x1).unwrap() <= 1e-8);
    }
}
