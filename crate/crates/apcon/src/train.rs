//! Adam training loop for the physics-informed risks: staircase learning
//! rate, fresh collocation points every iteration, and gradient accumulation
//! over bounded tape chunks so that large collocation batches stay within
//! memory.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_bundle, write_bundle, ArrayBundle, Dataset};
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::physics::{
    empirical_risk_gradient, initial_grid, predict_rho_grid, BoundaryPoint, CollocationBatch,
    ModelFamily, OperatorModel, ProblemSpec, RiskReport, SampleBatch, Side,
};
use crate::refsolve::{default_eval_grid, solve_transport_ap, KineticGrid};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Test error is evaluated every this many epochs, plus at the final epoch.
const EVAL_EVERY: usize = 10;
/// Periodic checkpoint cadence in epochs.
const CHECKPOINT_EVERY: usize = 100;
/// Spatial resolution of the reference solves behind the test error.
const REF_NX: usize = 200;
/// Default cap on trunk columns per tape; larger collocation batches are
/// split into chunks whose weighted gradients sum to the full-batch gradient.
const MAX_CHUNK_COLS: usize = 4096;
/// Overrides the chunk cap, and with it the (still deterministic) gradient
/// reduction order. Values that do not parse to a positive integer fall back
/// to the default.
pub const CHUNK_COLS_ENV: &str = "APCON_CHUNK_COLS";

/// Chunk cap honoured by `fit`, read once per run from the environment.
pub fn chunk_cols() -> usize {
    match std::env::var(CHUNK_COLS_ENV) {
        Ok(s) => s.trim().parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(MAX_CHUNK_COLS),
        Err(_) => MAX_CHUNK_COLS,
    }
}
/// Decorrelates the collocation stream from the parameter init stream.
const COLLOC_SEED_SALT: u64 = 0xc011_0c8d;

/// Optimization hyperparameters. Defaults reproduce the full protocol; desk
/// runs shrink `epochs` and the collocation counts. Fields omitted from a
/// config file keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_b: usize,
    pub n_int: usize,
    pub n_bdy: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            lr0: 1e-4,
            decay: 0.96,
            decay_every: 100,
            batch_b: 4,
            n_int: 1 << 10,
            n_bdy: 1 << 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_b == 0 || self.n_int == 0 || self.n_bdy == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "batch size, collocation counts and decay cadence must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }

    /// Hex digest identifying this configuration in checkpoint files.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Staircase schedule: lr0 * decay^floor(epoch / decay_every).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// First and second gradient moments of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient entry
/// aborts before any state is touched, naming the parameter segment.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParameterVector,
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "gradient length {} does not match {} parameters",
            grad.len(),
            n
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {} (segment {})",
            i,
            params.layout.segment_name_at(i)
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step.min(i32::MAX as u64) as i32);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

// ---- collocation sampling --------------------------------------------------------

/// Uniform draw from the open interval (0, 1).
fn open01(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Fresh collocation points: `n_int` interior points uniform on the open
/// box, `n_bdy` wall points alternating sides with incoming velocities, and
/// the full sensor grid for the initial term.
pub fn sample_collocation(
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> CollocationBatch {
    let (xl, xr) = problem.x_range;
    let interior = (0..cfg.n_int)
        .map(|_| {
            let t = problem.t_max * open01(rng);
            let x = xl + (xr - xl) * open01(rng);
            let v = 2.0 * open01(rng) - 1.0;
            (t, x, v)
        })
        .collect();
    let boundary = (0..cfg.n_bdy)
        .map(|i| {
            let t = problem.t_max * open01(rng);
            let speed = open01(rng);
            if i % 2 == 0 {
                BoundaryPoint { t, v: speed, side: Side::Left }
            } else {
                BoundaryPoint { t, v: -speed, side: Side::Right }
            }
        })
        .collect();
    CollocationBatch {
        interior,
        boundary,
        initial: initial_grid(problem.x_range),
    }
}

// ---- chunked gradient accumulation -------------------------------------------------

/// Trunk columns one interior point costs, counting every net evaluated on
/// its velocity block.
fn interior_cols(model: &OperatorModel) -> usize {
    let k = model.quad.len();
    match model.kind.family() {
        ModelFamily::Full => k + 1,
        ModelFamily::MicroMacro => k + 2,
        ModelFamily::EvenOdd => 2 * (k + 2) + 1,
    }
}

fn boundary_cols(model: &OperatorModel) -> usize {
    let k = model.quad.len();
    match model.kind.family() {
        ModelFamily::Full => 1,
        ModelFamily::MicroMacro => k + 2,
        ModelFamily::EvenOdd => 4,
    }
}

fn initial_cols(model: &OperatorModel) -> usize {
    match model.kind.family() {
        ModelFamily::Full => 1,
        ModelFamily::MicroMacro => 3,
        ModelFamily::EvenOdd => 4,
    }
}

fn accumulate(
    into: &mut Vec<(&'static str, f64)>,
    grad: &mut [f64],
    rep: &RiskReport,
    grad_chunk: &[f64],
    w: f64,
) {
    for &(name, val) in &rep.terms {
        match into.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 += w * val,
            None => into.push((name, w * val)),
        }
    }
    for (g, gc) in grad.iter_mut().zip(grad_chunk) {
        *g += w * gc;
    }
}

/// Risk and gradient of the full collocation batch, evaluated as a weighted
/// sum over single-group chunks of at most `max_cols` trunk columns each.
/// Groups are means over their own points, so a chunk of n_c of n points
/// enters with weight n_c / n; the result matches the single-tape gradient
/// up to rounding, with peak memory bounded by the chunk size.
pub fn chunked_risk_gradient(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    samples: &SampleBatch,
    colloc: &CollocationBatch,
    max_cols: usize,
) -> Result<(RiskReport, Vec<f64>)> {
    colloc.validate(problem)?;
    let mut terms: Vec<(&'static str, f64)> = Vec::new();
    let mut grad = vec![0.0; pv.len()];
    let chunk_pts = |cols: usize| (max_cols / cols).max(1);

    for chunk in colloc.interior.chunks(chunk_pts(interior_cols(model))) {
        let cb = CollocationBatch {
            interior: chunk.to_vec(),
            boundary: vec![],
            initial: vec![],
        };
        let (rep, g) = empirical_risk_gradient(model, pv, problem, samples, &cb)?;
        let w = chunk.len() as f64 / colloc.interior.len() as f64;
        accumulate(&mut terms, &mut grad, &rep, &g, w);
    }
    for chunk in colloc.boundary.chunks(chunk_pts(boundary_cols(model))) {
        let cb = CollocationBatch {
            interior: vec![],
            boundary: chunk.to_vec(),
            initial: vec![],
        };
        let (rep, g) = empirical_risk_gradient(model, pv, problem, samples, &cb)?;
        let w = chunk.len() as f64 / colloc.boundary.len() as f64;
        accumulate(&mut terms, &mut grad, &rep, &g, w);
    }
    for chunk in colloc.initial.chunks(chunk_pts(initial_cols(model))) {
        let cb = CollocationBatch {
            interior: vec![],
            boundary: vec![],
            initial: chunk.to_vec(),
        };
        let (rep, g) = empirical_risk_gradient(model, pv, problem, samples, &cb)?;
        let w = chunk.len() as f64 / colloc.initial.len() as f64;
        accumulate(&mut terms, &mut grad, &rep, &g, w);
    }

    let total = terms.iter().map(|&(_, v)| v).sum();
    Ok((RiskReport { total, terms }, grad))
}

// ---- test-error evaluation ---------------------------------------------------------

/// Reference densities for the test samples, resampled once onto the
/// evaluation grid.
struct TestEvaluator {
    ts: Vec<f64>,
    xs: Vec<f64>,
    inputs: Vec<Array2<f64>>,
    refs: Vec<Array2<f64>>,
    norms: Vec<f64>,
}

impl TestEvaluator {
    fn new(problem: &ProblemSpec, test: &[crate::data::InitialFunctionSample]) -> Result<Self> {
        let (ts, xs) = default_eval_grid(problem);
        let grid = KineticGrid::for_problem(problem, REF_NX)?;
        let mut inputs = Vec::with_capacity(test.len());
        let mut refs = Vec::with_capacity(test.len());
        let mut norms = Vec::with_capacity(test.len());
        for sample in test {
            let field = solve_transport_ap(problem, &grid, sample)?;
            let resampled = field.resample(&ts, &xs);
            let norm = resampled.iter().map(|r| r * r).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config(
                    "reference density vanishes identically; relative error undefined".into(),
                ));
            }
            inputs.push(sample.values.clone());
            refs.push(resampled);
            norms.push(norm);
        }
        Ok(TestEvaluator { ts, xs, inputs, refs, norms })
    }

    /// Mean relative l2 density error over the test samples.
    fn error(&self, model: &OperatorModel, pv: &ParameterVector) -> Result<f64> {
        let mut sum = 0.0;
        for ((input, reference), norm) in self.inputs.iter().zip(&self.refs).zip(&self.norms) {
            let pred = predict_rho_grid(model, pv, input, &self.ts, &self.xs)?;
            let diff = (&pred - reference).iter().map(|d| d * d).sum::<f64>().sqrt();
            sum += diff / norm;
        }
        Ok(sum / self.inputs.len() as f64)
    }
}

// ---- checkpoints and logs ----------------------------------------------------------

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Writes parameters and optimizer moments with identifying metadata.
pub fn save_checkpoint(
    path: &Path,
    model: &OperatorModel,
    pv: &ParameterVector,
    adam: &AdamState,
    cfg: &TrainConfig,
    epoch: usize,
    test_err: Option<f64>,
) -> Result<()> {
    let bundle = ArrayBundle {
        meta: serde_json::json!({
            "kind": model.kind.label(),
            "settings": model.settings,
            "epoch": epoch,
            "step": adam.step,
            "test_rel_l2": test_err,
            "config_sha256": cfg.hash(),
        }),
        arrays: vec![
            ("params".into(), row(&pv.values)),
            ("adam_m".into(), row(&adam.m)),
            ("adam_v".into(), row(&adam.v)),
        ],
    };
    write_bundle(path, &bundle)
}

/// Reads a checkpoint back for the given model, restoring parameter values
/// and optimizer state.
pub fn load_checkpoint(
    path: &Path,
    model: &OperatorModel,
) -> Result<(ParameterVector, AdamState, serde_json::Value)> {
    let bundle = read_bundle(path)?;
    let kind = bundle.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("?");
    if kind != model.kind.label() {
        return Err(Error::Format(format!(
            "checkpoint for {kind}, expected {}",
            model.kind.label()
        )));
    }
    let take = |name: &str| -> Result<Vec<f64>> {
        let arr = bundle
            .arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array {name}")))?;
        if arr.len() != model.layout.total_len() {
            return Err(Error::Shape(format!(
                "checkpoint array {name} has {} values, expected {}",
                arr.len(),
                model.layout.total_len()
            )));
        }
        Ok(arr.iter().copied().collect())
    };
    let params = ParameterVector {
        layout: model.layout.clone(),
        values: take("params")?,
    };
    let adam = AdamState {
        m: take("adam_m")?,
        v: take("adam_v")?,
        step: bundle.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0),
    };
    Ok((params, adam, bundle.meta))
}

/// Per-epoch log entry: averaged training risk terms and, on evaluation
/// epochs, the test error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub test_err: Option<f64>,
}

fn log_header(rec: &EpochRecord) -> String {
    let mut s = String::from("epoch,lr,loss");
    for (name, _) in &rec.terms {
        s.push(',');
        s.push_str(name);
    }
    s.push_str(",test_rel_l2\n");
    s
}

fn log_line(rec: &EpochRecord) -> String {
    let mut s = format!("{},{:.6e},{:.10e}", rec.epoch, rec.lr, rec.loss);
    for &(_, v) in &rec.terms {
        s.push_str(&format!(",{v:.10e}"));
    }
    match rec.test_err {
        Some(e) => s.push_str(&format!(",{e:.10e}\n")),
        None => s.push_str(",\n"),
    }
    s
}

// ---- the training loop ---------------------------------------------------------------

/// Parameters at the lowest test error seen so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub params: ParameterVector,
    pub test_err: f64,
    pub epoch: usize,
}

/// Outcome of `fit`: final parameters, best checkpoint, per-epoch history,
/// and the divergence diagnostic if optimization aborted.
#[derive(Debug)]
pub struct FitResult {
    pub params: ParameterVector,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
    pub divergence: Option<String>,
    pub adam: AdamState,
}

/// Trains `model` on the dataset's training split. Each epoch passes over
/// the training samples in batches of `batch_b`, resampling collocation
/// points every iteration; the test error is evaluated periodically against
/// reference solutions computed once. When `out_dir` is given, a CSV log and
/// checkpoint files (best by test error, plus a periodic latest) are written
/// there. A non-finite risk or gradient aborts the loop, retaining the last
/// good state; structural errors propagate.
pub fn fit(
    model: &OperatorModel,
    dataset: &Dataset,
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    problem.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let batches: Vec<SampleBatch> = dataset
        .train
        .chunks(cfg.batch_b)
        .map(|chunk| {
            let images: Vec<Array2<f64>> = chunk.iter().map(|s| s.values.clone()).collect();
            SampleBatch::from_images(&images)
        })
        .collect::<Result<_>>()?;

    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ COLLOC_SEED_SALT);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestSnapshot> = None;
    let mut divergence = None;
    let mut evaluator: Option<TestEvaluator> = None;

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(
                dir.join("train_log.csv"),
            )?))
        }
        None => None,
    };

    let max_cols = chunk_cols();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut term_sums: Vec<(&'static str, f64)> = Vec::new();
        let mut loss_sum = 0.0;
        for batch in &batches {
            let colloc = sample_collocation(problem, cfg, &mut rng);
            let outcome =
                chunked_risk_gradient(model, &params, problem, batch, &colloc, max_cols)
                    .and_then(|(rep, grad)| {
                        adam_step(&mut adam, &mut params, &grad, lr)?;
                        Ok(rep)
                    });
            match outcome {
                Ok(rep) => {
                    loss_sum += rep.total;
                    for (name, val) in rep.terms {
                        match term_sums.iter_mut().find(|(n, _)| *n == name) {
                            Some(e) => e.1 += val,
                            None => term_sums.push((name, val)),
                        }
                    }
                }
                Err(Error::NonFinite(what)) => {
                    divergence = Some(format!("epoch {epoch}: {what}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let iters = batches.len() as f64;
        let terms: Vec<(&'static str, f64)> =
            term_sums.into_iter().map(|(n, v)| (n, v / iters)).collect();
        let loss = loss_sum / iters;

        let eval_now = !dataset.test.is_empty()
            && ((epoch + 1) % EVAL_EVERY == 0 || epoch + 1 == cfg.epochs);
        let test_err = if eval_now {
            if evaluator.is_none() {
                evaluator = Some(TestEvaluator::new(problem, &dataset.test)?);
            }
            Some(evaluator.as_ref().expect("just built").error(model, &params)?)
        } else {
            None
        };
        if let Some(err) = test_err {
            if best.as_ref().map_or(true, |b| err < b.test_err) {
                best = Some(BestSnapshot {
                    params: params.clone(),
                    test_err: err,
                    epoch,
                });
                if let Some(dir) = out_dir {
                    save_checkpoint(
                        &dir.join("best.ckpt"),
                        model,
                        &params,
                        &adam,
                        cfg,
                        epoch,
                        Some(err),
                    )?;
                }
            }
        }

        let record = EpochRecord { epoch, lr, loss, terms, test_err };
        if let Some(w) = log.as_mut() {
            if epoch == 0 {
                w.write_all(log_header(&record).as_bytes())?;
            }
            w.write_all(log_line(&record).as_bytes())?;
            w.flush()?;
        }
        history.push(record);

        if let Some(dir) = out_dir {
            if (epoch + 1) % CHECKPOINT_EVERY == 0 {
                save_checkpoint(
                    &dir.join("latest.ckpt"),
                    model,
                    &params,
                    &adam,
                    cfg,
                    epoch,
                    test_err,
                )?;
            }
        }
    }

    Ok(FitResult { params, best, history, divergence, adam })
}

#[cfg(test)]
mod tests;
