use std::sync::Arc;

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::data::{DatasetMeta, InitialFunctionSample, ProblemId};
use crate::error::Error;
use crate::params::{Init, ParameterLayout};
use crate::physics::{sensor_v_grid, sensor_x_grid, ModelKind};

fn scalar_params(values: &[f64]) -> ParameterVector {
    let mut layout = ParameterLayout::new();
    layout.push("theta", values.len(), 1, Init::Zeros);
    let mut pv = ParameterVector::init(Arc::new(layout), 0);
    pv.values.copy_from_slice(values);
    pv
}

fn desk_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        n_int: 4,
        n_bdy: 2,
        batch_b: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

/// Problem II compatible sample: zero walls, nonnegative, smooth.
fn synthetic_sample(amplitude: f64) -> InitialFunctionSample {
    let x_grid = sensor_x_grid((0.0, 1.0));
    let v_grid = sensor_v_grid();
    let values = Array2::from_shape_fn((x_grid.len(), v_grid.len()), |(i, j)| {
        amplitude
            * (std::f64::consts::PI * x_grid[i]).sin()
            * (1.0 + 0.3 * (std::f64::consts::PI * v_grid[j]).cos())
    });
    InitialFunctionSample {
        values,
        x_grid,
        v_grid,
        problem_id: ProblemId::II,
    }
}

fn synthetic_dataset(n_train: usize, n_test: usize) -> Dataset {
    let samples = |n: usize, base: f64| {
        (0..n)
            .map(|k| synthetic_sample(base + 0.1 * k as f64))
            .collect::<Vec<_>>()
    };
    Dataset {
        train: samples(n_train, 0.5),
        test: samples(n_test, 1.1),
        meta: DatasetMeta {
            m: n_train + n_test,
            l: 0.25,
            seed: 0,
            split_ratio: (7, 1),
            kernel: "synthetic".into(),
            problem: ProblemId::II,
        },
    }
}

#[test]
fn lr_schedule_follows_the_staircase() {
    let cfg = TrainConfig::default();
    assert_abs_diff_eq!(lr_at(&cfg, 0), 1.0e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(&cfg, 99), 1.0e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(&cfg, 100), 9.6e-5, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_at(&cfg, 200), 9.216e-5, epsilon = 1e-18);
    let mut last = f64::INFINITY;
    for epoch in 0..=2000 {
        let lr = lr_at(&cfg, epoch);
        assert!(lr <= last, "schedule increased at epoch {epoch}");
        last = lr;
    }
}

#[test]
fn config_rejects_bad_values() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_b: 0, ..TrainConfig::default() },
        TrainConfig { n_int: 0, ..TrainConfig::default() },
        TrainConfig { n_bdy: 0, ..TrainConfig::default() },
        TrainConfig { decay_every: 0, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { lr0: f64::NAN, ..TrainConfig::default() },
        TrainConfig { decay: 0.0, ..TrainConfig::default() },
        TrainConfig { decay: 1.5, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "accepted {bad:?}");
    }
    // epochs = 0 is legal: a no-op fit
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_ok());
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut pv = scalar_params(&[1.0, 1.0]);
    let mut state = AdamState::new(2);
    adam_step(&mut state, &mut pv, &[1.0, -1.0], 0.1).unwrap();
    // bias correction makes m_hat/sqrt(v_hat) = sign(g) on the first step
    assert_abs_diff_eq!(pv.values[0], 0.9, epsilon = 1e-8);
    assert_abs_diff_eq!(pv.values[1], 1.1, epsilon = 1e-8);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut pv = scalar_params(&[0.75]);
    let mut state = AdamState::new(1);
    adam_step(&mut state, &mut pv, &[0.0], 0.1).unwrap();
    assert_eq!(pv.values[0], 0.75);
    assert_eq!(state.m[0], 0.0);

    adam_step(&mut state, &mut pv, &[1.0], 0.1).unwrap();
    let m_before = state.m[0];
    adam_step(&mut state, &mut pv, &[0.0], 0.1).unwrap();
    assert_abs_diff_eq!(state.m[0], ADAM_BETA1 * m_before, epsilon = 1e-16);
}

#[test]
fn adam_descends_a_scalar_quadratic() {
    let mut pv = scalar_params(&[1.0]);
    let mut state = AdamState::new(1);
    let mut previous = pv.values[0];
    for step in 1..=100 {
        let grad = [2.0 * pv.values[0]];
        adam_step(&mut state, &mut pv, &grad, 5e-3).unwrap();
        let theta = pv.values[0];
        assert!(theta > 0.0, "overshot zero at step {step}");
        if step > 2 {
            assert!(theta.abs() < previous.abs(), "|theta| grew at step {step}");
        }
        previous = theta;
    }
    assert!(pv.values[0] < 0.7);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut pv = scalar_params(&[1.0, 2.0]);
    let before = pv.values.clone();
    let mut state = AdamState::new(2);
    let err = adam_step(&mut state, &mut pv, &[0.0, f64::NAN], 0.1).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("theta"), "message was {msg}"),
        other => panic!("expected NonFinite, got {other}"),
    }
    assert_eq!(pv.values, before);
    assert_eq!(state.step, 0);

    assert!(adam_step(&mut state, &mut pv, &[f64::INFINITY, 0.0], 0.1).is_err());
    assert!(matches!(
        adam_step(&mut state, &mut pv, &[1.0], 0.1),
        Err(Error::Shape(_))
    ));
}

#[test]
fn collocation_has_exact_counts_sides_and_open_coordinates() {
    let problem = ProblemSpec::problem_i(1.0);
    let cfg = TrainConfig { n_int: 50, n_bdy: 9, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sample_collocation(&problem, &cfg, &mut rng);

    assert_eq!(batch.interior.len(), 50);
    assert_eq!(batch.boundary.len(), 9);
    assert_eq!(batch.initial, initial_grid(problem.x_range));
    for &(t, x, v) in &batch.interior {
        assert!(t > 0.0 && t < problem.t_max);
        assert!(x > 0.0 && x < 1.0);
        assert!(v > -1.0 && v < 1.0);
    }
    let left: Vec<_> = batch.boundary.iter().filter(|p| p.side == Side::Left).collect();
    let right: Vec<_> = batch.boundary.iter().filter(|p| p.side == Side::Right).collect();
    assert_eq!(left.len(), 5);
    assert_eq!(right.len(), 4);
    assert!(left.iter().all(|p| p.v > 0.0 && p.v < 1.0));
    assert!(right.iter().all(|p| p.v < 0.0 && p.v > -1.0));
    batch.validate(&problem).unwrap();

    // a fresh draw differs
    let again = sample_collocation(&problem, &cfg, &mut rng);
    assert_ne!(batch.interior, again.interior);
}

#[test]
fn collocation_interior_marginals_are_uniform() {
    let problem = ProblemSpec::problem_ii(1e-3);
    let n = 8000;
    let cfg = TrainConfig { n_int: n, n_bdy: 2, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = sample_collocation(&problem, &cfg, &mut rng);
    let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
        batch.interior.iter().map(f).sum::<f64>() / n as f64
    };
    // 3 sigma / sqrt(N) with sigma = range / sqrt(12)
    let band = |range: f64| 3.0 * range / 12f64.sqrt() / (n as f64).sqrt();
    assert_abs_diff_eq!(mean(&|p| p.0), problem.t_max / 2.0, epsilon = band(problem.t_max));
    assert_abs_diff_eq!(mean(&|p| p.1), 0.5, epsilon = band(1.0));
    assert_abs_diff_eq!(mean(&|p| p.2), 0.0, epsilon = band(2.0));
}

#[test]
fn chunked_gradient_matches_a_single_tape() {
    let problem = ProblemSpec::problem_i(0.8);
    let rows = Array2::from_shape_fn((2, 2048), |(b, j)| {
        0.8 + 0.2 * ((b * 2048 + j) as f64 * 0.003).sin()
    });
    let samples = SampleBatch::from_rows(&rows).unwrap();
    let grid = initial_grid(problem.x_range);
    let colloc = CollocationBatch {
        interior: vec![
            (0.1, 0.3, 0.5),
            (0.2, 0.7, -0.4),
            (0.3, 0.5, 0.9),
            (0.15, 0.25, -0.8),
            (0.4, 0.9, 0.2),
            (0.45, 0.1, -0.1),
        ],
        boundary: vec![
            BoundaryPoint { t: 0.1, v: 0.6, side: Side::Left },
            BoundaryPoint { t: 0.2, v: -0.7, side: Side::Right },
            BoundaryPoint { t: 0.3, v: 0.2, side: Side::Left },
            BoundaryPoint { t: 0.4, v: -0.3, side: Side::Right },
        ],
        initial: grid[..40].to_vec(),
    };

    for kind in [ModelKind::ApconV1, ModelKind::ApconV2] {
        let model = OperatorModel::new(kind).unwrap();
        let pv = model.init_params(11);
        let (full_rep, full_grad) =
            empirical_risk_gradient(&model, &pv, &problem, &samples, &colloc).unwrap();
        let (rep, grad) =
            chunked_risk_gradient(&model, &pv, &problem, &samples, &colloc, 64).unwrap();

        assert_abs_diff_eq!(rep.total, full_rep.total, epsilon = 1e-12 * full_rep.total.abs());
        assert_eq!(rep.terms.len(), full_rep.terms.len());
        for (name, val) in &full_rep.terms {
            let chunked = rep.terms.iter().find(|(n, _)| n == name).expect("term present").1;
            assert_abs_diff_eq!(chunked, *val, epsilon = 1e-12 * val.abs().max(1e-12));
        }
        let scale = full_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let dist = grad
            .iter()
            .zip(&full_grad)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-10 * scale, "{kind:?}: gradient mismatch {dist:e} vs {scale:e}");
    }
}

#[test]
fn fit_zero_epochs_leaves_the_model_untouched() {
    let model = OperatorModel::new(ModelKind::ApconV1).unwrap();
    let dataset = synthetic_dataset(3, 1);
    let problem = ProblemSpec::problem_ii(1.0);
    let cfg = TrainConfig { epochs: 0, ..desk_cfg() };
    let result = fit(&model, &dataset, &problem, &cfg, None).unwrap();
    assert_eq!(result.params.values, model.init_params(cfg.seed).values);
    assert!(result.history.is_empty());
    assert!(result.best.is_none());
    assert!(result.divergence.is_none());
}

#[test]
fn fit_records_history_and_repeats_bitwise() {
    let model = OperatorModel::new(ModelKind::ApconV1).unwrap();
    let dataset = synthetic_dataset(3, 1);
    let problem = ProblemSpec::problem_ii(1.0);
    let cfg = desk_cfg();

    let first = fit(&model, &dataset, &problem, &cfg, None).unwrap();
    assert_eq!(first.history.len(), cfg.epochs);
    assert!(first.divergence.is_none());
    for rec in &first.history {
        assert!(rec.loss.is_finite());
        assert_eq!(rec.lr, lr_at(&cfg, rec.epoch));
    }
    // the final epoch always evaluates; intermediate short epochs do not
    assert!(first.history[2].test_err.is_some());
    assert!(first.history[0].test_err.is_none());
    let best = first.best.as_ref().expect("final evaluation recorded a best");
    assert_eq!(best.epoch, 2);
    assert!(best.test_err.is_finite());

    let second = fit(&model, &dataset, &problem, &cfg, None).unwrap();
    assert_eq!(first.history, second.history);
    assert_eq!(first.params.values, second.params.values);
}

#[test]
fn fit_aborts_on_divergence_and_keeps_finite_params() {
    let model = OperatorModel::new(ModelKind::Pidon).unwrap();
    let dataset = synthetic_dataset(2, 1);
    let problem = ProblemSpec::problem_ii(1.0);
    let cfg = TrainConfig { epochs: 6, lr0: 1e12, batch_b: 2, n_int: 4, n_bdy: 2, seed: 3, ..TrainConfig::default() };
    let result = fit(&model, &dataset, &problem, &cfg, None).unwrap();
    let msg = result.divergence.expect("exploding step must trip the abort");
    assert!(msg.contains("epoch"), "diagnostic was {msg}");
    assert!(result.history.len() < cfg.epochs);
    assert!(result.params.values.iter().all(|p| p.is_finite()));
}

#[test]
fn checkpoint_files_roundtrip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let model = OperatorModel::new(ModelKind::ApconV1).unwrap();
    let pv = model.init_params(3);
    let mut adam = AdamState::new(pv.len());
    adam.step = 7;
    for (i, (m, v)) in adam.m.iter_mut().zip(adam.v.iter_mut()).enumerate() {
        *m = i as f64 * 1e-3;
        *v = i as f64 * 1e-6;
    }
    let cfg = TrainConfig::default();
    save_checkpoint(&path, &model, &pv, &adam, &cfg, 42, Some(0.125)).unwrap();

    let (loaded, state, meta) = load_checkpoint(&path, &model).unwrap();
    assert_eq!(loaded.values, pv.values);
    assert_eq!(state.m, adam.m);
    assert_eq!(state.v, adam.v);
    assert_eq!(state.step, 7);
    assert_eq!(meta["kind"], "APCON-v1");
    assert_eq!(meta["epoch"], 42);
    assert_eq!(meta["config_sha256"], serde_json::json!(cfg.hash()));

    let other = OperatorModel::new(ModelKind::ApconV2).unwrap();
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::Format(_))));
}

#[test]
fn fit_writes_log_and_best_checkpoint() {
    let dir = tempdir().unwrap();
    let model = OperatorModel::new(ModelKind::ApconV1).unwrap();
    let dataset = synthetic_dataset(2, 1);
    let problem = ProblemSpec::problem_ii(1.0);
    let cfg = TrainConfig { epochs: 2, ..desk_cfg() };
    let result = fit(&model, &dataset, &problem, &cfg, Some(dir.path())).unwrap();

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1 + cfg.epochs);
    assert_eq!(
        lines[0],
        "epoch,lr,loss,macro,micro,boundary,initial,test_rel_l2"
    );
    let last: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(last.len(), 8);
    assert_eq!(last[0], "1");
    assert!(last[7].parse::<f64>().unwrap().is_finite());

    let (best_params, _, meta) =
        load_checkpoint(&dir.path().join("best.ckpt"), &model).unwrap();
    let best = result.best.expect("best recorded");
    assert_eq!(best_params.values, best.params.values);
    assert_eq!(meta["epoch"], best.epoch);
    assert!(!dir.path().join("latest.ckpt").exists());
}
