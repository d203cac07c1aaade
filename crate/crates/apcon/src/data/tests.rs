use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;

#[test]
fn kernel_values_at_reference_distances() {
    let l = 0.5;
    assert_eq!(sq_exp_kernel((0.3, -0.7), (0.3, -0.7), l), 1.0);
    // |z - y| = l sqrt(2) makes the exponent exactly -1
    let k = sq_exp_kernel((0.0, 0.0), (l, l), l);
    assert_abs_diff_eq!(k, (-1.0f64).exp(), epsilon = 1e-15);
    assert_abs_diff_eq!(k, 0.367879441171442, epsilon = 1e-12);
}

#[test]
fn field_draws_are_reproducible() {
    let pts = sensor_grid_points((0.0, 1.0));
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let a = grf_sample(&pts[..64], 0.5, &mut r1).unwrap();
    let b = grf_sample(&pts[..64], 0.5, &mut r2).unwrap();
    assert_eq!(a, b);
    let c = grf_sample(&pts[..64], 0.5, &mut r1).unwrap();
    assert_ne!(a, c);
}

#[test]
fn field_statistics_match_the_kernel() {
    // coarse grid keeps the Monte-Carlo loop cheap
    let mut pts = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            pts.push((i as f64 / 5.0, -1.0 + 2.0 * j as f64 / 5.0));
        }
    }
    let sampler = GrfSampler::new(pts.clone(), 0.5).unwrap();
    assert!(sampler.jitter <= 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = sampler.sample_many(10_000, &mut rng);

    let var = draws.column(10).fold(0.0, |s, &v| s + v * v) / draws.nrows() as f64;
    assert!((0.94..=1.06).contains(&var), "variance {var}");

    // stationarity: equal separations give equal covariances
    let cov = |a: usize, b: usize| {
        draws
            .column(a)
            .iter()
            .zip(draws.column(b).iter())
            .map(|(&x, &y)| x * y)
            .sum::<f64>()
            / draws.nrows() as f64
    };
    let (c1, c2) = (cov(0, 1), cov(18, 19));
    let expected = sq_exp_kernel(pts[0], pts[1], 0.5);
    assert!((c1 - c2).abs() <= 0.1, "{c1} vs {c2}");
    assert!((c1 - expected).abs() <= 0.05, "{c1} vs kernel {expected}");
}

#[test]
fn inflow_formula_spot_values() {
    // blend vanishes at incoming boundary points
    let f = compose_problem1(&[123.0], &[0.0], &[0.7]);
    assert_eq!(f[[0, 0]], 1.0);
    let f = compose_problem1(&[-55.0], &[1.0], &[-0.3]);
    assert_eq!(f[[0, 0]], 0.5);
    // interior: (relu3(1/2) * 1/2) * 2 + 3/4
    let f = compose_problem1(&[2.0], &[0.5], &[0.5]);
    assert_abs_diff_eq!(f[[0, 0]], 0.875, epsilon = 1e-15);
}

#[test]
fn inflow_samples_satisfy_wall_values_exactly() {
    let samples = generate(ProblemId::I, 6, 0.5, 9).unwrap();
    assert_eq!(samples.len(), 6);
    for s in &samples {
        s.validate().unwrap();
        assert!(s.values.iter().all(|&f| f > 0.0));
        for (j, &v) in s.v_grid.iter().enumerate() {
            if v > 0.0 {
                assert_eq!(s.values[[0, j]], 1.0);
            }
            if v < 0.0 {
                assert_eq!(s.values[[SENSOR_SHAPE.0 - 1, j]], 0.5);
            }
        }
    }
    // distinct draws
    assert_ne!(samples[0].values, samples[1].values);
}

#[test]
fn maxwellian_formula_spot_values() {
    assert_abs_diff_eq!(problem2_value(1.0, 0.5, 0.0), 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(
        problem2_value(1.0, 0.5, 1.0 / 3.0),
        6.0 * (-0.5f64).exp(),
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(problem2_value(1.0, 0.5, 1.0 / 3.0), 3.639183958, epsilon = 1e-9);
    for v in [-1.0, -0.2, 0.0, 0.9] {
        assert_eq!(problem2_value(0.7, 0.0, v), 0.0);
        assert_eq!(problem2_value(0.7, 1.0, v), 0.0);
    }
}

#[test]
fn maxwellian_samples_vanish_at_walls() {
    let samples = generate(ProblemId::II, 8, 0.5, 13).unwrap();
    for s in &samples {
        s.validate().unwrap();
        let h = SENSOR_SHAPE.0;
        for j in 0..SENSOR_SHAPE.1 {
            assert_eq!(s.values[[0, j]], 0.0);
            assert_eq!(s.values[[h - 1, j]], 0.0);
        }
    }
}

#[test]
fn split_counts_follow_the_ratio() {
    let meta = |m: usize| DatasetMeta {
        m,
        l: 0.5,
        seed: 21,
        split_ratio: (7, 1),
        kernel: "squared-exponential".into(),
        problem: ProblemId::II,
    };
    let d = split(generate(ProblemId::II, 1024, 0.5, 21).unwrap(), (7, 1), meta(1024)).unwrap();
    assert_eq!(d.train.len(), 896);
    assert_eq!(d.test.len(), 128);

    let d = split(generate(ProblemId::II, 8, 0.5, 22).unwrap(), (7, 1), meta(8)).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (7, 1));

    // remainder goes to train
    let d = split(generate(ProblemId::II, 9, 0.5, 23).unwrap(), (7, 1), meta(9)).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (8, 1));

    assert!(split(generate(ProblemId::II, 4, 0.5, 24).unwrap(), (7, 0), meta(4)).is_err());
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let a = build_dataset(ProblemId::II, 16, 0.5, 31).unwrap();
    let b = build_dataset(ProblemId::II, 16, 0.5, 31).unwrap();
    assert_eq!(a, b);
    let c = build_dataset(ProblemId::II, 16, 0.5, 32).unwrap();
    assert_ne!(a, c);
    // every generated sample lands in exactly one part
    let total = a.train.len() + a.test.len();
    assert_eq!(total, 16);
}

#[test]
fn dataset_roundtrip_is_bit_identical() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("set.apbn");
    let d = build_dataset(ProblemId::I, 8, 0.5, 41).unwrap();
    d.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(d, back);

    // same seed twice gives identical bytes on disk
    let path2 = dir.path().join("set2.apbn");
    build_dataset(ProblemId::I, 8, 0.5, 41).unwrap().save(&path2).unwrap();
    let b1 = std::fs::read(&path).unwrap();
    let b2 = std::fs::read(&path2).unwrap();
    assert_eq!(b1, b2);
}

#[test]
fn bundle_rejects_foreign_files() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bogus.apbn");
    std::fs::write(&path, b"NOPE....").unwrap();
    assert!(matches!(read_bundle(&path), Err(Error::Format(_))));
}

#[test]
fn bilinear_interpolation_reproduces_bilinear_fields() {
    let xs = sensor_x_grid((0.0, 1.0));
    let vs = sensor_v_grid();
    let f = |x: f64, v: f64| 0.3 + 1.7 * x - 0.9 * v + 0.4 * x * v;
    let sample = InitialFunctionSample {
        values: Array2::from_shape_fn(SENSOR_SHAPE, |(i, j)| f(xs[i], vs[j])),
        x_grid: xs,
        v_grid: vs,
        problem_id: ProblemId::II,
    };
    for (x, v) in [(0.0, -1.0), (0.517, 0.303), (1.0, 1.0), (0.99, -0.97)] {
        assert_abs_diff_eq!(sample.interp(x, v), f(x, v), epsilon = 1e-12);
    }
    // clamped outside the grid
    assert_abs_diff_eq!(sample.interp(-0.5, 0.0), sample.interp(0.0, 0.0), epsilon = 1e-15);
}

#[test]
fn row_stacking_matches_sensor_flattening() {
    let samples = generate(ProblemId::II, 3, 0.5, 51).unwrap();
    let rows = to_rows(&samples);
    assert_eq!(rows.dim(), (3, SENSOR_SHAPE.0 * SENSOR_SHAPE.1));
    assert_eq!(rows[[1, 5 * 64 + 9]], samples[1].values[[5, 9]]);
    let batch = crate::physics::SampleBatch::from_rows(&rows).unwrap();
    assert_eq!(batch.len(), 3);
}
