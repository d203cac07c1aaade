//! Scratch pilot: desk-scale training run with progress written to a CSV log.
//!
//! args: kind eps epochs n_int n_bdy batch lr0 seed problem out_dir

use std::time::Instant;

use apcon::data::{build_dataset, ProblemId};
use apcon::physics::{ModelKind, OperatorModel, ProblemSpec};
use apcon::train::{fit, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind: ModelKind = args[0].parse().unwrap();
    let eps: f64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let n_int: usize = args[3].parse().unwrap();
    let n_bdy: usize = args[4].parse().unwrap();
    let batch_b: usize = args[5].parse().unwrap();
    let lr0: f64 = args[6].parse().unwrap();
    let seed: u64 = args[7].parse().unwrap();
    let problem_id: ProblemId = args[8].parse().unwrap();
    let out_dir = std::path::PathBuf::from(&args[9]);

    let problem = match problem_id {
        ProblemId::I => ProblemSpec::problem_i(eps),
        ProblemId::II => ProblemSpec::problem_ii(eps),
    };
    let t0 = Instant::now();
    let dataset = build_dataset(problem_id, 64, 0.5, 7).unwrap();
    println!("dataset: {} train / {} test ({:.1}s)", dataset.train.len(), dataset.test.len(), t0.elapsed().as_secs_f64());

    let cfg = TrainConfig { epochs, lr0, batch_b, n_int, n_bdy, seed, ..TrainConfig::default() };
    let model = OperatorModel::new(kind).unwrap();
    let t1 = Instant::now();
    let result = fit(&model, &dataset, &problem, &cfg, Some(&out_dir)).unwrap();
    let wall = t1.elapsed().as_secs_f64();

    println!("trained {} epochs in {:.1}s ({:.3}s/iter)", result.history.len(), wall,
        wall / (result.history.len().max(1) as f64 * dataset.train.len().div_ceil(batch_b) as f64));
    if let Some(d) = &result.divergence {
        println!("diverged: {d}");
    }
    if let Some(b) = &result.best {
        println!("best test rel_l2 = {:.4e} at epoch {}", b.test_err, b.epoch);
    }
    if let (Some(first), Some(last)) = (result.history.first(), result.history.last()) {
        println!("loss {:.4e} -> {:.4e} ({}x)", first.loss, last.loss, first.loss / last.loss);
    }
}
