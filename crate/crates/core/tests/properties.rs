//! Property tests for invariants that must hold for every admissible input.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tether_koopman::controllers::{feedback_tension, mpc_solve, FeedbackGains, MpcWeights, Predictor};
use tether_koopman::dataset::{collect_dataset, CollectConfig};
use tether_koopman::dynamics::{rhs, step_held, Dimensional, State, SystemParams};
use tether_koopman::koopman::{edmd_fit, edmd_residual};
use tether_koopman::nn::{spectral_norm, spectral_normalize};
use tether_koopman::online::OnlineWindow;
use tether_koopman::training::{supervised_loss, LinearParts, TrainConfig};
use tether_koopman::uncertainty::{estimate_d_backward, BackwardEstimator};

fn admissible_state() -> impl Strategy<Value = State> {
    (-3.0..3.0f64, -0.95..0.5f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, l, da, dl)| State::new(a, l, da, dl))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kinematic_rows_copy_the_rates(x in admissible_state(), u in 0.0..10.0f64, d in -1.0..1.0f64) {
        let dx = rhs(&x, u, d).unwrap();
        prop_assert_eq!(dx[0], x.dalpha);
        prop_assert_eq!(dx[1], x.dlam);
    }

    #[test]
    fn uncertainty_enters_the_last_row_only(x in admissible_state(), u in 0.0..10.0f64, d in -1.0..1.0f64) {
        let with = rhs(&x, u, d).unwrap();
        let without = rhs(&x, u, 0.0).unwrap();
        prop_assert_eq!(with[0] - without[0], 0.0);
        prop_assert_eq!(with[1] - without[1], 0.0);
        prop_assert_eq!(with[2] - without[2], 0.0);
        prop_assert!((with[3] - without[3] - d).abs() <= 1e-12 * (1.0 + with[3].abs()));
    }

    #[test]
    fn dimensional_roundtrip(length in 1.0..2e4f64, rate in -5.0..5.0f64, time in 0.0..1e5f64, tension in 0.0..1e3f64) {
        let p = SystemParams::reference();
        let q = Dimensional { length, length_rate: rate, time, tension };
        let back = p.to_dimensional(p.to_dimensionless(q).unwrap()).unwrap();
        for (a, b) in [(back.length, length), (back.length_rate, rate), (back.time, time), (back.tension, tension)] {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300) + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn window_keeps_the_last_m_samples(m in 2usize..20, seq in prop::collection::vec(-1.0..1.0f64, 0..60)) {
        let mut w = OnlineWindow::new(m).unwrap();
        for &d in &seq {
            w.push(d, DVector::from_element(2, d));
        }
        let kept: Vec<f64> = w.iter().map(|s| s.d).collect();
        let start = seq.len().saturating_sub(m);
        prop_assert_eq!(kept, seq[start..].to_vec());
        prop_assert_eq!(w.is_full(), seq.len() >= m);
    }

    #[test]
    fn equilibrium_tension_is_three_for_any_gains(k1 in 0.01..10.0f64, k2 in 0.0..10.0f64, k3 in 0.01..10.0f64) {
        let t = feedback_tension(&State::ORIGIN, 0.0, &FeedbackGains { k1, k2, k3 }).unwrap();
        prop_assert_eq!(t.raw, 3.0);
    }

    #[test]
    fn spectral_normalization_bounds_the_gain(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0..3.0));
        let n = spectral_normalize(&w).unwrap();
        prop_assert!(spectral_norm(&n).unwrap() <= 1.0 + 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_estimate_is_causal(
        x0 in admissible_state(),
        us in prop::collection::vec(0.0..6.0f64, 12),
        tail in prop::collection::vec(0.0..6.0f64, 4),
    ) {
        let run = |controls: &[f64]| {
            let mut est = BackwardEstimator::new(0.01);
            let mut x = x0;
            let mut out = Vec::new();
            for &u in controls {
                out.push(est.observe(&x).unwrap());
                est.commit(x, u);
                x = match step_held(&x, u, 0.0, 0.01) {
                    Ok(next) => next,
                    Err(_) => break,
                };
            }
            out
        };
        let a = run(&us);
        let mut changed = us[..8].to_vec();
        changed.extend_from_slice(&tail);
        let b = run(&changed);
        let k = a.len().min(b.len()).min(9);
        prop_assert_eq!(&a[..k], &b[..k]);
    }

    #[test]
    fn backward_estimator_matches_the_two_sample_formula(x0 in admissible_state(), u in 0.0..6.0f64, d in -0.3..0.3f64) {
        let Ok(x1) = step_held(&x0, u, d, 0.01) else { return Ok(()) };
        let mut est = BackwardEstimator::new(0.01);
        prop_assert_eq!(est.observe(&x0).unwrap(), None);
        est.commit(x0, u);
        prop_assert_eq!(est.observe(&x1).unwrap(), Some(estimate_d_backward(&x0, &x1, u, 0.01).unwrap()));
    }

    #[test]
    fn edmd_fit_is_locally_optimal(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p, k) = (5, 3, 60);
        let z1 = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let delta = DMatrix::from_fn(p, k, |_, _| rng.gen_range(-1.0..1.0));
        let z2 = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let fit = edmd_fit(&z1, &z2, &delta, 0.0).unwrap();
        let best = edmd_residual(&fit.a, &fit.b, &z1, &z2, &delta);
        for _ in 0..10 {
            let mut da = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut db = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
            da *= 1e-3 / da.norm();
            db *= 1e-3 / db.norm();
            prop_assert!(best <= edmd_residual(&(&fit.a + da), &(&fit.b + db), &z1, &z2, &delta) + 1e-12);
        }
    }

    #[test]
    fn mpc_objective_never_increases(x in admissible_state()) {
        let w = MpcWeights { horizon: 10, ..MpcWeights::default() };
        if let Ok(sol) = mpc_solve(&x, &Predictor::Nominal, &w, 0.01, None) {
            prop_assert!(sol.history.windows(2).all(|h| h[1] <= h[0]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn supervised_loss_ignores_trajectory_order(perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let ds = collect_dataset(&CollectConfig { k: 6, m: 12, seed: 3, ..CollectConfig::default() }).unwrap();
        let cfg = TrainConfig { hidden: 8, lifted_dim: 5, ..TrainConfig::default() };
        let parts = LinearParts::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let base = supervised_loss(&parts, &ds.trajectories, &cfg).unwrap();
        let shuffled: Vec<_> = perm.iter().map(|&i| ds.trajectories[i].clone()).collect();
        let other = supervised_loss(&parts, &shuffled, &cfg).unwrap();
        prop_assert!((base.total - other.total).abs() <= 1e-12 * base.total.abs().max(1.0));
    }
}
