//! Command line entry point: dataset generation, config-driven training,
//! checkpoint evaluation, architecture ablations, timing comparisons, and
//! standalone reference solves.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use apcon::data::{build_dataset, generate, Dataset, ProblemId};
use apcon::error::{Error, Result};
use apcon::experiment::{
    load_model_checkpoint, relative_l2, run_ablation, run_experiment, time_inference,
    time_reference, uniform_grid, AblationKind, ExperimentConfig, ResultRow,
};
use apcon::physics::ProblemSpec;
use apcon::refsolve::{solve_transport_ap, DensityField, KineticGrid};

const CONFIG_HELP: &str = "\
Config file (JSON):
  {
    \"problem\": \"I\",                 required: \"I\" or \"II\"
    \"eps\": 1.0,                      required: Knudsen number, > 0
    \"model\": \"APCON_V1\",            required: PIDON | PICON | APDON_V1 |
                                               APCON_V1 | APDON_V2 | APCON_V2
    \"dataset\": \"data/problem1.bin\",  required: file from `data gen`
    \"out_dir\": \"runs/apcon_v1\",      required: artifact directory
    \"trials\": 1,                     independently seeded runs, best kept
    \"nt_eval\": 50,                   evaluation grid, time points
    \"nx_eval\": 32,                   evaluation grid, space points
    \"ref_nx\": 200,                   reference solver cells
    \"label\": null,                   overrides the method column
    \"train\": {                       any subset of the fields
      \"epochs\": 5000, \"lr0\": 1e-4, \"decay\": 0.96, \"decay_every\": 100,
      \"batch_b\": 4, \"n_int\": 1024, \"n_bdy\": 256, \"seed\": 0
    },
    \"settings\": {                    architecture; defaults follow the kind
      \"layer_norm\": true, \"filter_layers\": 2, \"channels\": 4,
      \"kernel\": [2, 2], \"pool\": [2, 2],
      \"pool_order\": \"pool_then_activation\"
    }
  }
Omitted optional fields keep the defaults shown above.

Environment:
  APCON_CHUNK_COLS  positive integer capping trunk columns per gradient tape;
                    fixes the (always deterministic) gradient reduction order.
                    Default 4096. Reruns under one value are bit-identical.";

#[derive(Parser)]
#[command(
    name = "apcon",
    version,
    about = "Operator networks for multiscale linear transport, trained and \
             scored against a classical kinetic solver"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Train from a config file, keep the best of N trials, and score it.
    #[command(after_help = CONFIG_HELP)]
    Train {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Score a checkpoint against fresh reference solves on a test split.
    Eval {
        /// Checkpoint written by `train` (model.ckpt or any best.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose test split provides inputs and references.
        #[arg(long)]
        dataset: PathBuf,
        /// Knudsen number for the reference solves.
        #[arg(long)]
        eps: f64,
        /// Evaluation grid, time points.
        #[arg(long, default_value_t = 50)]
        nt: usize,
        /// Evaluation grid, space points.
        #[arg(long, default_value_t = 32)]
        nx: usize,
        /// Reference solver cells.
        #[arg(long, default_value_t = 200)]
        ref_nx: usize,
    },
    /// Sweep one architecture axis around a base config.
    #[command(after_help = CONFIG_HELP)]
    Ablate {
        /// Axis: layernorm | pool_order | kernel_shape | channels | filter_layers.
        #[arg(long)]
        kind: AblationKind,
        /// JSON experiment config for the baseline.
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare model inference time against the reference solver.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose test split provides the input functions.
        #[arg(long)]
        dataset: PathBuf,
        /// Knudsen number for the reference solves.
        #[arg(long)]
        eps: f64,
        /// Timed repetitions per side.
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 50)]
        nt: usize,
        #[arg(long, default_value_t = 32)]
        nx: usize,
        #[arg(long, default_value_t = 200)]
        ref_nx: usize,
    },
    /// Solve the kinetic reference for one initial sample and write the
    /// density history as CSV.
    Reference {
        /// Problem I (inflow walls) or II (zero walls).
        #[arg(long)]
        problem: ProblemId,
        /// Knudsen number.
        #[arg(long)]
        eps: f64,
        /// Spatial cells.
        #[arg(long, default_value_t = 200)]
        nx: usize,
        /// Takes the initial sample from this dataset's test split; without
        /// it one sample is drawn fresh from the input distribution.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Correlation length for a freshly drawn sample.
        #[arg(long, default_value_t = 0.5)]
        l: f64,
        /// Seed for a freshly drawn sample.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long, default_value = "rho_ref.csv")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Draw initial conditions from the Gaussian random field and split 7:1.
    Gen {
        #[arg(long)]
        problem: ProblemId,
        /// Number of samples before the split.
        #[arg(long, default_value_t = 1024)]
        m: usize,
        /// Correlation length of the field.
        #[arg(long, default_value_t = 0.5)]
        l: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn spec_for(problem: ProblemId, eps: f64) -> ProblemSpec {
    match problem {
        ProblemId::I => ProblemSpec::problem_i(eps),
        ProblemId::II => ProblemSpec::problem_ii(eps),
    }
}

fn print_row(row: &ResultRow) {
    let rel = match row.rel_l2 {
        Some(v) => format!("{v:.4e}"),
        None => "diverged".into(),
    };
    println!(
        "{}: rel_l2 {} [{}], {} params, train {:.1} s, infer {:.2} ms",
        row.method, rel, row.status, row.param_count, row.wall_time_train_s, row.wall_time_infer_ms
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Data { cmd: DataCmd::Gen { problem, m, l, seed, out } } => {
            let ds = build_dataset(problem, m, l, seed)?;
            ds.save(&out)?;
            println!(
                "wrote {} samples (train {} / test {}) for Problem {} to {}",
                m,
                ds.train.len(),
                ds.test.len(),
                problem,
                out.display()
            );
        }
        Cmd::Train { config, trials } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let row = run_experiment(&cfg)?;
            print_row(&row);
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Cmd::Eval { checkpoint, dataset, eps, nt, nx, ref_nx } => {
            let (model, pv) = load_model_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&dataset)?;
            let spec = spec_for(ds.meta.problem, eps);
            let (ts, xs) = uniform_grid(&spec, nt, nx);
            let grid = KineticGrid::for_problem(&spec, ref_nx)?;
            let mut sum = 0.0;
            for (i, sample) in ds.test.iter().enumerate() {
                let reference = DensityField {
                    rho: solve_transport_ap(&spec, &grid, sample)?.resample(&ts, &xs),
                    t_grid: ts.clone(),
                    x_grid: xs.clone(),
                };
                let pred = DensityField {
                    rho: apcon::physics::predict_rho_grid(&model, &pv, &sample.values, &ts, &xs)?,
                    t_grid: ts.clone(),
                    x_grid: xs.clone(),
                };
                let rel = relative_l2(&pred, &reference)?;
                sum += rel;
                println!("sample {i}: rel_l2 {rel:.4e}");
            }
            println!(
                "{} on {} test samples: mean rel_l2 {:.4e}",
                model.kind.label(),
                ds.test.len(),
                sum / ds.test.len() as f64
            );
        }
        Cmd::Ablate { kind, config } => {
            let base = ExperimentConfig::load(&config)?;
            let rows = run_ablation(kind, &base)?;
            for row in &rows {
                print_row(row);
            }
            println!(
                "comparison table: {}",
                base.out_dir.join(format!("ablation_{kind}.csv")).display()
            );
        }
        Cmd::Bench { checkpoint, dataset, eps, reps, nt, nx, ref_nx } => {
            let (model, pv) = load_model_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&dataset)?;
            let spec = spec_for(ds.meta.problem, eps);
            let (ts, xs) = uniform_grid(&spec, nt, nx);
            let inputs: Vec<_> = ds.test.iter().map(|s| s.values.clone()).collect();
            let inf = time_inference(&model, &pv, &inputs, &ts, &xs, reps)?;
            let refr = time_reference(&spec, ref_nx, &ds.test, reps)?;
            println!(
                "inference ({} grid points): {:.3} ms +/- {:.3} over {} reps",
                nt * nx,
                inf.mean_ms,
                inf.std_ms,
                inf.reps
            );
            println!(
                "reference ({} cells):       {:.3} ms +/- {:.3} over {} reps",
                ref_nx, refr.mean_ms, refr.std_ms, refr.reps
            );
            if inf.mean_ms > 0.0 {
                println!("speedup: {:.1}x", refr.mean_ms / inf.mean_ms);
            }
        }
        Cmd::Reference { problem, eps, nx, dataset, index, l, seed, out } => {
            let sample = match dataset {
                Some(path) => {
                    let ds = Dataset::load(&path)?;
                    if ds.meta.problem != problem {
                        return Err(Error::Config(format!(
                            "dataset holds Problem {} samples, asked for Problem {}",
                            ds.meta.problem, problem
                        )));
                    }
                    ds.test
                        .into_iter()
                        .nth(index)
                        .ok_or_else(|| Error::Config(format!("test split has no index {index}")))?
                }
                None => generate(problem, 1, l, seed)?.remove(0),
            };
            let spec = spec_for(problem, eps);
            let grid = KineticGrid::for_problem(&spec, nx)?;
            let t0 = std::time::Instant::now();
            let field = solve_transport_ap(&spec, &grid, &sample)?;
            let wall = t0.elapsed().as_secs_f64();
            let mut buf = Vec::new();
            field.write_csv(&mut buf)?;
            std::fs::write(&out, buf)?;
            println!(
                "Problem {problem}, eps {eps:.1e}, {nx} cells, {} steps: {:.2} s, wrote {}",
                field.t_grid.len() - 1,
                wall,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
