//! Scratch benchmark: per-group empirical risk gradient cost.

use std::time::Instant;

use ndarray::Array2;

use apcon::physics::{
    empirical_risk_gradient, initial_grid, BoundaryPoint, CollocationBatch, ModelKind,
    OperatorModel, ProblemSpec, SampleBatch, Side,
};

fn interior(n: usize, t_max: f64) -> Vec<(f64, f64, f64)> {
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            let t = t_max * (0.05 + 0.9 * u);
            let x = 0.05 + 0.9 * ((i as f64 * 0.618_033_988_749_894_8) % 1.0);
            let v = -0.95 + 1.9 * ((i as f64 * 0.414_213_562_373_095_1) % 1.0);
            (t, x, v)
        })
        .collect()
}

fn boundary(n: usize, t_max: f64) -> Vec<BoundaryPoint> {
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            let t = t_max * (0.05 + 0.9 * u);
            let mag = 0.3 + 0.5 * ((i as f64 * 0.707) % 1.0);
            if i % 2 == 0 {
                BoundaryPoint { t, v: mag, side: Side::Left }
            } else {
                BoundaryPoint { t, v: -mag, side: Side::Right }
            }
        })
        .collect()
}

fn main() {
    let problem = ProblemSpec::problem_i(1.0);
    let rows = Array2::from_shape_fn((4, 2048), |(b, j)| {
        0.7 + 0.3 * ((b * 2048 + j) as f64 * 0.001).sin()
    });
    let samples = SampleBatch::from_rows(&rows).unwrap();
    let init = initial_grid(problem.x_range);

    for kind in [ModelKind::Picon, ModelKind::ApconV1, ModelKind::ApconV2] {
        let model = OperatorModel::new(kind).unwrap();
        let params = model.init_params(7);
        let mut run = |label: &str, cb: &CollocationBatch| {
            let t0 = Instant::now();
            let (risk, grad) =
                empirical_risk_gradient(&model, &params, &problem, &samples, cb).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            println!("{kind:?} {label:>14}: {dt:>7.3}s  risk={:.3e} |g|={gn:.2e}", risk.total);
        };

        for n_int in [64usize, 128] {
            let cb = CollocationBatch {
                interior: interior(n_int, problem.t_max),
                boundary: vec![],
                initial: vec![],
            };
            run(&format!("int {n_int}"), &cb);
        }
        let cb = CollocationBatch {
            interior: vec![],
            boundary: boundary(64, problem.t_max),
            initial: vec![],
        };
        run("bdy 64", &cb);
        for n0 in [512usize, 2048] {
            let cb = CollocationBatch {
                interior: vec![],
                boundary: vec![],
                initial: init.iter().step_by(init.len() / n0).copied().take(n0).collect(),
            };
            run(&format!("init {n0}"), &cb);
        }
        let cb = CollocationBatch {
            interior: interior(64, problem.t_max),
            boundary: boundary(32, problem.t_max),
            initial: init.clone(),
        };
        run("full 64/32", &cb);
    }
}
