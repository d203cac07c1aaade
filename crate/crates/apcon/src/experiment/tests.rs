use super::*;
use crate::data::build_dataset;
use approx::assert_abs_diff_eq;
use ndarray::array;

fn field(rho: Array2<f64>) -> DensityField {
    let (nt, nx) = rho.dim();
    DensityField {
        rho,
        t_grid: (0..nt).map(|i| i as f64).collect(),
        x_grid: (0..nx).map(|j| j as f64).collect(),
    }
}

fn smoke_config(dataset: &Path, out_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ProblemId::I, 1.0, ModelKind::ApconV1, dataset, out_dir);
    cfg.train.epochs = 12;
    cfg.train.lr0 = 1e-3;
    cfg.train.n_int = 4;
    cfg.train.n_bdy = 2;
    cfg.nt_eval = 12;
    cfg.nx_eval = 10;
    cfg.ref_nx = 16;
    cfg
}

#[test]
fn relative_error_matches_hand_computations() {
    let reference = field(array![[1.0, 1.0], [1.0, 1.0]]);

    assert_eq!(relative_l2(&reference, &reference).unwrap(), 0.0);

    // || (0,1,2,3) || / || (1,1,1,1) || = sqrt(14) / 2
    let pred = field(array![[1.0, 2.0], [3.0, 4.0]]);
    assert_abs_diff_eq!(
        relative_l2(&pred, &reference).unwrap(),
        14.0f64.sqrt() / 2.0,
        epsilon = 1e-15
    );

    let rho = field(array![[1.0, 2.0], [3.0, 4.0]]);
    let scaled = field(rho.rho.mapv(|v| 1.1 * v));
    assert_abs_diff_eq!(relative_l2(&scaled, &rho).unwrap(), 0.1, epsilon = 1e-12);
}

#[test]
fn relative_error_is_scale_invariant() {
    let pred = field(array![[0.3, -1.2], [2.0, 0.7]]);
    let reference = field(array![[1.0, 0.5], [0.25, 2.0]]);
    let base = relative_l2(&pred, &reference).unwrap();
    for c in [3.7, 1e-6, 2.5e8] {
        let scaled = relative_l2(
            &field(pred.rho.mapv(|v| c * v)),
            &field(reference.rho.mapv(|v| c * v)),
        )
        .unwrap();
        assert_abs_diff_eq!(scaled, base, epsilon = 1e-12 * base.max(1.0));
    }
}

#[test]
fn relative_error_rejects_bad_inputs() {
    let a = field(array![[1.0, 2.0], [3.0, 4.0]]);
    let mut b = field(array![[1.0, 2.0], [3.0, 4.0]]);
    b.x_grid = vec![0.0, 2.0];
    assert!(matches!(relative_l2(&a, &b), Err(Error::Shape(_))));

    let zero = field(array![[0.0, 0.0], [0.0, 0.0]]);
    let err = relative_l2(&a, &zero).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "zero reference: {err}");

    let nan = field(array![[f64::NAN, 0.0], [0.0, 0.0]]);
    assert!(matches!(relative_l2(&nan, &a), Err(Error::NonFinite(_))));
}

#[test]
fn config_files_fill_defaults_and_round_trip() {
    let minimal = r#"{
        "problem": "II",
        "eps": 1e-4,
        "model": "APCON_V2",
        "dataset": "data.bin",
        "out_dir": "runs/a"
    }"#;
    let cfg = ExperimentConfig::from_json(minimal).unwrap();
    assert_eq!(cfg.problem, ProblemId::II);
    assert_eq!(cfg.model, ModelKind::ApconV2);
    assert_eq!(cfg.eps, 1e-4);
    assert_eq!((cfg.nt_eval, cfg.nx_eval, cfg.ref_nx, cfg.trials), (50, 32, 200, 1));
    assert_eq!(cfg.settings, None);
    assert_eq!(cfg.train, TrainConfig::default());

    let round: ExperimentConfig =
        ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(round, cfg);

    // partial train blocks keep the remaining protocol fields
    let partial = r#"{
        "problem": "I", "eps": 1.0, "model": "PICON",
        "dataset": "d.bin", "out_dir": "o",
        "train": { "epochs": 3, "seed": 9 }
    }"#;
    let cfg = ExperimentConfig::from_json(partial).unwrap();
    assert_eq!((cfg.train.epochs, cfg.train.seed), (3, 9));
    assert_eq!(cfg.train.lr0, TrainConfig::default().lr0);

    let typo = r#"{"problem": "I", "eps": 1.0, "model": "PICON",
        "dataset": "d", "out_dir": "o", "epoch": 5}"#;
    assert!(ExperimentConfig::from_json(typo).is_err());
}

#[test]
fn config_validation_and_hash() {
    let base = ExperimentConfig::new(
        ProblemId::I,
        1.0,
        ModelKind::ApconV1,
        Path::new("d.bin"),
        Path::new("out"),
    );
    assert!(base.validate().is_ok());

    let mut bad = base.clone();
    bad.eps = 0.0;
    assert!(bad.validate().is_err());
    bad = base.clone();
    bad.trials = 0;
    assert!(bad.validate().is_err());
    bad = base.clone();
    bad.nt_eval = 1;
    assert!(bad.validate().is_err());
    bad = base.clone();
    bad.ref_nx = 3;
    assert!(bad.validate().is_err());

    assert_eq!(base.hash(), base.clone().hash());
    let mut other = base.clone();
    other.eps = 0.5;
    assert_ne!(base.hash(), other.hash());
    assert_eq!(base.hash().len(), 64);
}

#[test]
fn default_eval_grid_matches_the_training_metric_grid() {
    let cfg = ExperimentConfig::new(
        ProblemId::I,
        1.0,
        ModelKind::Picon,
        Path::new("d"),
        Path::new("o"),
    );
    let spec = cfg.problem_spec();
    let (ts, xs) = cfg.eval_grid(&spec);
    let (rts, rxs) = crate::refsolve::default_eval_grid(&spec);
    assert_eq!(ts, rts);
    assert_eq!(xs, rxs);
}

#[test]
fn result_rows_append_without_rewriting() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    let mut row = ResultRow {
        method: "APCON-v1".into(),
        problem: ProblemId::I,
        eps: 1.0,
        rel_l2: Some(0.0123),
        param_count: 104_306,
        wall_time_train_s: 1.5,
        wall_time_infer_ms: 2.25,
        trials: 1,
        status: "ok".into(),
        config_sha256: "abc".into(),
    };
    append_result(&path, &row).unwrap();
    row.rel_l2 = None;
    row.status = "failed: io, disk".into();
    append_result(&path, &row).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], RESULTS_HEADER);
    assert!(lines[1].starts_with("APCON-v1,I,1e0,1.230000e-2,104306,"));
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields[3], "diverged");
    // a comma inside the status must not add a column
    assert_eq!(fields.len(), RESULTS_HEADER.split(',').count());
    assert_eq!(fields[8], "failed: io; disk");
}

#[test]
fn timing_stats_handle_zero_reps_and_spread() {
    let model = OperatorModel::new(ModelKind::Picon).unwrap();
    let pv = model.init_params(0);
    let input = Array2::<f64>::zeros(crate::physics::SENSOR_SHAPE);
    let ts = [0.0, 0.05, 0.1];
    let xs = [0.25, 0.5, 0.75];

    let empty = time_inference(&model, &pv, &[input.clone()], &ts, &xs, 0).unwrap();
    assert_eq!(empty, TimingStats { reps: 0, mean_ms: 0.0, std_ms: 0.0 });

    let one = time_inference(&model, &pv, &[input.clone()], &ts, &xs, 1).unwrap();
    assert_eq!(one.reps, 1);
    assert!(one.mean_ms > 0.0 && one.std_ms == 0.0);

    let three = time_inference(&model, &pv, &[input], &ts, &xs, 3).unwrap();
    assert_eq!(three.reps, 3);
    assert!(three.mean_ms > 0.0 && three.std_ms >= 0.0);

    assert!(time_inference(&model, &pv, &[], &ts, &xs, 1).is_err());
}

#[test]
fn reference_timer_runs_the_kinetic_solver() {
    let ds = build_dataset(ProblemId::II, 8, 0.5, 3).unwrap();
    let spec = ProblemSpec::problem_ii(1.0);
    let stats = time_reference(&spec, 16, &ds.test, 2).unwrap();
    assert_eq!(stats.reps, 2);
    assert!(stats.mean_ms > 0.0);
    assert!(time_reference(&spec, 16, &[], 1).is_err());
}

#[test]
fn experiment_runs_end_to_end_and_reproduces_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.bin");
    build_dataset(ProblemId::I, 8, 0.5, 11).unwrap().save(&data_path).unwrap();
    let cfg = smoke_config(&data_path, &dir.path().join("run"));

    let row = run_experiment(&cfg).unwrap();
    assert_eq!(row.status, "ok", "smoke run should converge below the sentinel");
    let rel = row.rel_l2.expect("converged run records a value");
    assert!(rel.is_finite() && rel > 0.0 && rel <= DIVERGED_THRESHOLD);
    assert_eq!(row.method, "APCON-v1");
    assert_eq!(row.param_count, 104_306);
    assert_eq!(row.config_sha256, cfg.hash());
    assert!(row.wall_time_train_s > 0.0 && row.wall_time_infer_ms > 0.0);

    let out = &cfg.out_dir;
    for name in ["config.json", "summary.json", "results.csv", "model.ckpt"] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
    assert!(out.join("trial_0").join("train_log.csv").exists());
    assert!(out.join("trial_0").join("best.ckpt").exists());
    // one test sample in an 8-sample split
    assert!(out.join("fields").join("pred_0.csv").exists());
    assert!(out.join("fields").join("ref_0.csv").exists());
    assert!(!out.join("fields").join("pred_1.csv").exists());

    // the winning checkpoint reloads into the same architecture
    let (model, pv) = load_model_checkpoint(&out.join("model.ckpt")).unwrap();
    assert_eq!(model.kind, ModelKind::ApconV1);
    assert_eq!(pv.values.len(), 104_306);
    assert!(pv.values.iter().all(|v| v.is_finite()));

    // a rerun of the identical config appends a second, matching row
    let again = run_experiment(&cfg).unwrap();
    assert_eq!(again.rel_l2, row.rel_l2);
    assert_eq!(again.config_sha256, row.config_sha256);
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["trials"].as_array().unwrap().len(), 1);
}

#[test]
fn diverging_runs_record_the_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.bin");
    build_dataset(ProblemId::I, 8, 0.5, 11).unwrap().save(&data_path).unwrap();
    let mut cfg = smoke_config(&data_path, &dir.path().join("run"));
    cfg.model = ModelKind::Pidon;
    cfg.train.epochs = 2;
    cfg.train.lr0 = 1e12;

    let row = run_experiment(&cfg).unwrap();
    assert_eq!(row.status, "diverged");
    assert_eq!(row.rel_l2, None);
    assert!(!cfg.out_dir.join("model.ckpt").exists());

    let text = fs::read_to_string(cfg.out_dir.join("results.csv")).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last.split(',').nth(3).unwrap(), "diverged");
}

#[test]
fn stage_failures_mark_the_row_and_keep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.bin");
    // a test sample with zero density makes the relative metric undefined,
    // failing the evaluation stage only
    let mut ds = build_dataset(ProblemId::II, 8, 0.5, 11).unwrap();
    let zero = InitialFunctionSample {
        values: Array2::zeros(ds.test[0].values.dim()),
        x_grid: ds.test[0].x_grid.clone(),
        v_grid: ds.test[0].v_grid.clone(),
        problem_id: ProblemId::II,
    };
    ds.test = vec![zero];
    ds.save(&data_path).unwrap();

    let mut cfg = smoke_config(&data_path, &dir.path().join("run"));
    cfg.problem = ProblemId::II;
    cfg.train.epochs = 1;

    let row = run_experiment(&cfg).unwrap();
    assert!(row.status.starts_with("failed:"), "status: {}", row.status);
    assert_eq!(row.rel_l2, None);
    assert!(cfg.out_dir.join("config.json").exists());
    let text = fs::read_to_string(cfg.out_dir.join("results.csv")).unwrap();
    assert!(text.lines().last().unwrap().contains("failed:"));
}

#[test]
fn experiments_refuse_mismatched_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.bin");
    build_dataset(ProblemId::II, 8, 0.5, 3).unwrap().save(&data_path).unwrap();
    let cfg = smoke_config(&data_path, &dir.path().join("run"));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!cfg.out_dir.exists(), "no artifacts before the run starts");
}

#[test]
fn ablation_grids_enumerate_the_documented_variants() {
    let base = ModelSettings::for_kind(ModelKind::ApconV2);

    let ln = ablation_grid(AblationKind::LayerNorm, &base);
    assert_eq!(
        ln.iter().map(|(l, s)| (l.as_str(), s.layer_norm)).collect::<Vec<_>>(),
        vec![("layer_norm=on", true), ("layer_norm=off", false)]
    );

    let kernels = ablation_grid(AblationKind::KernelShape, &base);
    assert_eq!(
        kernels.iter().map(|(_, s)| s.kernel).collect::<Vec<_>>(),
        vec![(1, 2), (2, 2), (2, 4)]
    );
    assert_eq!(kernels[0].0, "kernel=1x2");

    let channels = ablation_grid(AblationKind::Channels, &base);
    assert_eq!(channels.iter().map(|(_, s)| s.channels).collect::<Vec<_>>(), vec![2, 4, 6]);

    let pools = ablation_grid(AblationKind::PoolOrder, &base);
    assert_eq!(pools.len(), 2);
    assert_ne!(pools[0].1.pool_order, pools[1].1.pool_order);

    let layers = ablation_grid(AblationKind::FilterLayers, &base);
    assert_eq!(layers.iter().map(|(_, s)| s.filter_layers).collect::<Vec<_>>(), vec![1, 2]);

    // every variant builds a valid model
    for kind in AblationKind::ALL {
        for (label, s) in ablation_grid(kind, &base) {
            OperatorModel::with_settings(ModelKind::ApconV2, &s)
                .unwrap_or_else(|e| panic!("variant {label}: {e}"));
        }
    }
}

#[test]
fn ablation_kind_parses_common_spellings() {
    for (text, kind) in [
        ("layernorm", AblationKind::LayerNorm),
        ("layer_norm", AblationKind::LayerNorm),
        ("pool-order", AblationKind::PoolOrder),
        ("kernel_shape", AblationKind::KernelShape),
        ("kernel", AblationKind::KernelShape),
        ("channels", AblationKind::Channels),
        ("filter_layers", AblationKind::FilterLayers),
    ] {
        assert_eq!(text.parse::<AblationKind>().unwrap(), kind);
    }
    assert!("dropout".parse::<AblationKind>().is_err());
}

#[test]
fn ablation_sweeps_emit_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.bin");
    build_dataset(ProblemId::I, 8, 0.5, 11).unwrap().save(&data_path).unwrap();
    let mut base = smoke_config(&data_path, &dir.path().join("sweep"));
    base.train.epochs = 12;

    let rows = run_ablation(AblationKind::FilterLayers, &base).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method, "APCON-v1[filter_layers=1]");
    assert_eq!(rows[1].method, "APCON-v1[filter_layers=2]");
    assert_ne!(rows[0].param_count, rows[1].param_count);
    assert_eq!(rows[1].param_count, 104_306);

    let table = base.out_dir.join("ablation_filter_layers.csv");
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(base.out_dir.join("filter-layers-1").join("config.json").exists());

    // per-variant checkpoints reload with their own architecture
    let ckpt = base.out_dir.join("filter-layers-1").join("model.ckpt");
    if ckpt.exists() {
        let (model, _) = load_model_checkpoint(&ckpt).unwrap();
        assert_eq!(model.settings.filter_layers, 1);
        assert_eq!(model.param_count(), rows[0].param_count);
    }

    let dense = ExperimentConfig::new(
        ProblemId::I,
        1.0,
        ModelKind::ApdonV1,
        &data_path,
        &dir.path().join("x"),
    );
    assert!(run_ablation(AblationKind::Channels, &dense).is_err());
}
