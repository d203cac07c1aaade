//! Experiment orchestration: trains models from a declarative config, scores
//! them against the kinetic reference solver, runs architecture ablations,
//! and times inference against the classical scheme. Every run leaves a
//! results row plus per-sample density grids on disk so comparisons never
//! depend on rerunning anything.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InitialFunctionSample, ProblemId};
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::physics::{predict_rho_grid, ModelKind, ModelSettings, OperatorModel, ProblemSpec};
use crate::refsolve::{solve_transport_ap, DensityField, KineticGrid};
use crate::train::{self, TrainConfig};

/// A final test error above this marks the run as diverged in the results.
pub const DIVERGED_THRESHOLD: f64 = 0.5;
/// Repetitions behind the inference-time column of a results row.
const ROW_TIMING_REPS: usize = 3;

// ---- error metric ------------------------------------------------------------------

/// Relative l2 distance between two densities on the same grid,
/// || pred - ref ||_F / || ref ||_F. Errors if the grids differ or the
/// reference vanishes identically (the metric is undefined there).
pub fn relative_l2(pred: &DensityField, reference: &DensityField) -> Result<f64> {
    pred.validate()?;
    reference.validate()?;
    if pred.t_grid != reference.t_grid || pred.x_grid != reference.x_grid {
        return Err(Error::Shape(
            "relative error needs both densities on the same grid".into(),
        ));
    }
    let denom = reference.rho.iter().map(|r| r * r).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Config(
            "reference density vanishes identically; relative error undefined".into(),
        ));
    }
    let diff = pred
        .rho
        .iter()
        .zip(reference.rho.iter())
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        .sqrt();
    Ok(diff / denom)
}

// ---- experiment configuration ------------------------------------------------------

fn default_nt_eval() -> usize {
    50
}
fn default_nx_eval() -> usize {
    32
}
fn default_ref_nx() -> usize {
    200
}
fn default_trials() -> usize {
    1
}

/// Everything one experiment needs, loadable from a JSON file. `settings`
/// and `train` fall back to the per-kind architecture and the full training
/// protocol when omitted; `label` overrides the method name in result rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemId,
    pub eps: f64,
    pub model: ModelKind,
    #[serde(default)]
    pub settings: Option<ModelSettings>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_nt_eval")]
    pub nt_eval: usize,
    #[serde(default = "default_nx_eval")]
    pub nx_eval: usize,
    #[serde(default = "default_ref_nx")]
    pub ref_nx: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub label: Option<String>,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// A config with required fields filled and every optional at its default.
    pub fn new(problem: ProblemId, eps: f64, model: ModelKind, dataset: &Path, out_dir: &Path) -> Self {
        ExperimentConfig {
            problem,
            eps,
            model,
            settings: None,
            train: TrainConfig::default(),
            nt_eval: default_nt_eval(),
            nx_eval: default_nx_eval(),
            ref_nx: default_ref_nx(),
            trials: default_trials(),
            label: None,
            dataset: dataset.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.nt_eval < 2 || self.nx_eval < 2 {
            return Err(Error::Config(format!(
                "evaluation grid needs at least 2 points per axis, got ({}, {})",
                self.nt_eval, self.nx_eval
            )));
        }
        if self.ref_nx < 4 {
            return Err(Error::Config(format!(
                "reference resolution must be at least 4 cells, got {}",
                self.ref_nx
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form; identifies the row in results files.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        match self.problem {
            ProblemId::I => ProblemSpec::problem_i(self.eps),
            ProblemId::II => ProblemSpec::problem_ii(self.eps),
        }
    }

    pub fn effective_settings(&self) -> ModelSettings {
        self.settings.clone().unwrap_or_else(|| ModelSettings::for_kind(self.model))
    }

    pub fn build_model(&self) -> Result<OperatorModel> {
        OperatorModel::with_settings(self.model, &self.effective_settings())
    }

    /// Uniform (t, x) evaluation grid; at the defaults (50, 32) it matches
    /// the grid the training loop scores test error on.
    pub fn eval_grid(&self, spec: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
        uniform_grid(spec, self.nt_eval, self.nx_eval)
    }

    /// Loads the dataset and checks it belongs to this config's problem.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = Dataset::load(&self.dataset)?;
        if ds.meta.problem != self.problem {
            return Err(Error::Config(format!(
                "dataset at {} holds Problem {} samples, config wants Problem {}",
                self.dataset.display(),
                ds.meta.problem,
                self.problem
            )));
        }
        Ok(ds)
    }

    fn method(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.model.label().to_string())
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Uniform (t, x) grid over a problem's time horizon and spatial domain.
pub fn uniform_grid(spec: &ProblemSpec, nt: usize, nx: usize) -> (Vec<f64>, Vec<f64>) {
    (
        linspace(0.0, spec.t_max, nt),
        linspace(spec.x_range.0, spec.x_range.1, nx),
    )
}

// ---- result rows -------------------------------------------------------------------

pub const RESULTS_HEADER: &str =
    "method,problem,eps,rel_l2,param_count,wall_time_train_s,wall_time_infer_ms,trials,status,config_sha256";

/// One line of a results file. `rel_l2 = None` stands for the "diverged"
/// sentinel; `status` is "ok", "diverged", or "failed: <reason>".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub problem: ProblemId,
    pub eps: f64,
    pub rel_l2: Option<f64>,
    pub param_count: usize,
    pub wall_time_train_s: f64,
    pub wall_time_infer_ms: f64,
    pub trials: usize,
    pub status: String,
    pub config_sha256: String,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        let rel = match self.rel_l2 {
            Some(v) => format!("{v:.6e}"),
            None => "diverged".into(),
        };
        // commas in a failure reason would shift the columns
        let status = self.status.replace(',', ";");
        format!(
            "{},{},{:e},{},{},{:.3},{:.4},{},{},{}",
            self.method,
            self.problem,
            self.eps,
            rel,
            self.param_count,
            self.wall_time_train_s,
            self.wall_time_infer_ms,
            self.trials,
            status,
            self.config_sha256
        )
    }
}

/// Appends a row, writing the header first when the file is new or empty.
/// Existing content is never rewritten.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{}", row.to_csv_line())?;
    f.flush()?;
    Ok(())
}

// ---- experiment driver -------------------------------------------------------------

/// Per-trial record kept in the run summary.
#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_test_rel_l2: Option<f64>,
    pub final_test_rel_l2: Option<f64>,
    pub divergence: Option<String>,
    pub wall_s: f64,
}

struct StageOutcome {
    rel_l2: Option<f64>,
    status: String,
    wall_train_s: f64,
    wall_infer_ms: f64,
    trials: Vec<TrialSummary>,
}

/// Trains `trials` seeds, keeps the best by test error, scores it against
/// fresh reference solves on the config's evaluation grid, and appends one
/// row to `<out_dir>/results.csv`. Artifacts per run: the resolved config,
/// a summary JSON, per-trial logs and checkpoints, the winning checkpoint as
/// `model.ckpt`, and per-test-sample predicted and reference density CSVs
/// under `fields/`. A failing stage still writes the row (marked failed)
/// and keeps whatever artifacts exist.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRow> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    let model = cfg.build_model()?;
    let spec = cfg.problem_spec();
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;

    let mut row = ResultRow {
        method: cfg.method(),
        problem: cfg.problem,
        eps: cfg.eps,
        rel_l2: None,
        param_count: model.param_count(),
        wall_time_train_s: 0.0,
        wall_time_infer_ms: 0.0,
        trials: cfg.trials,
        status: String::new(),
        config_sha256: cfg.hash(),
    };
    let mut summaries: Vec<TrialSummary> = Vec::new();
    match run_stages(cfg, &dataset, &model, &spec) {
        Ok(outcome) => {
            row.rel_l2 = outcome.rel_l2;
            row.status = outcome.status;
            row.wall_time_train_s = outcome.wall_train_s;
            row.wall_time_infer_ms = outcome.wall_infer_ms;
            summaries = outcome.trials;
        }
        Err(e) => {
            row.status = format!("failed: {e}");
        }
    }
    let summary = serde_json::json!({
        "config_sha256": row.config_sha256,
        "status": row.status,
        "rel_l2": row.rel_l2,
        "trials": summaries,
    });
    fs::write(
        cfg.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    append_result(&cfg.out_dir.join("results.csv"), &row)?;
    Ok(row)
}

fn run_stages(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    model: &OperatorModel,
    spec: &ProblemSpec,
) -> Result<StageOutcome> {
    let train_start = Instant::now();
    let mut summaries = Vec::with_capacity(cfg.trials);
    // best trial by the score its own training loop assigned
    let mut best: Option<(f64, usize, ParameterVector)> = None;
    for trial in 0..cfg.trials {
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.train.seed.wrapping_add(trial as u64);
        let trial_dir = cfg.out_dir.join(format!("trial_{trial}"));
        let t0 = Instant::now();
        let fit = train::fit(model, dataset, spec, &tcfg, Some(&trial_dir))?;
        let wall_s = t0.elapsed().as_secs_f64();
        let final_err = fit.history.last().and_then(|r| r.test_err);
        let snap = fit.best.as_ref();
        summaries.push(TrialSummary {
            trial,
            seed: tcfg.seed,
            best_epoch: snap.map(|b| b.epoch),
            best_test_rel_l2: snap.map(|b| b.test_err),
            final_test_rel_l2: final_err,
            divergence: fit.divergence.clone(),
            wall_s,
        });
        // a trial counts only if it stayed finite and ended converged
        let ended_ok = fit.divergence.is_none()
            && final_err.map(|e| e.is_finite() && e <= DIVERGED_THRESHOLD).unwrap_or(false);
        if ended_ok {
            if let Some(b) = fit.best {
                if best.as_ref().map(|(s, _, _)| b.test_err < *s).unwrap_or(true) {
                    best = Some((b.test_err, trial, b.params));
                }
            }
        }
    }
    let wall_train_s = train_start.elapsed().as_secs_f64();

    let (_score, winner, params) = match best {
        Some(b) => b,
        None => {
            return Ok(StageOutcome {
                rel_l2: None,
                status: "diverged".into(),
                wall_train_s,
                wall_infer_ms: 0.0,
                trials: summaries,
            });
        }
    };
    let src = cfg.out_dir.join(format!("trial_{winner}")).join("best.ckpt");
    if src.exists() {
        fs::copy(&src, cfg.out_dir.join("model.ckpt"))?;
    }

    // score the winner against fresh reference solves on the config grid
    let (ts, xs) = cfg.eval_grid(spec);
    let grid = KineticGrid::for_problem(spec, cfg.ref_nx)?;
    let fields_dir = cfg.out_dir.join("fields");
    fs::create_dir_all(&fields_dir)?;
    let mut sum = 0.0;
    for (i, sample) in dataset.test.iter().enumerate() {
        let reference = DensityField {
            rho: solve_transport_ap(spec, &grid, sample)?.resample(&ts, &xs),
            t_grid: ts.clone(),
            x_grid: xs.clone(),
        };
        let pred = DensityField {
            rho: predict_rho_grid(model, &params, &sample.values, &ts, &xs)?,
            t_grid: ts.clone(),
            x_grid: xs.clone(),
        };
        write_field_csv(&fields_dir.join(format!("pred_{i}.csv")), &pred)?;
        write_field_csv(&fields_dir.join(format!("ref_{i}.csv")), &reference)?;
        sum += relative_l2(&pred, &reference)?;
    }
    let rel = sum / dataset.test.len() as f64;

    let inputs: Vec<Array2<f64>> = dataset.test.iter().map(|s| s.values.clone()).collect();
    let timing = time_inference(model, &params, &inputs, &ts, &xs, ROW_TIMING_REPS)?;

    let (rel_l2, status) = if rel.is_finite() && rel <= DIVERGED_THRESHOLD {
        (Some(rel), "ok".to_string())
    } else {
        (None, "diverged".to_string())
    };
    Ok(StageOutcome {
        rel_l2,
        status,
        wall_train_s,
        wall_infer_ms: timing.mean_ms,
        trials: summaries,
    })
}

fn write_field_csv(path: &Path, field: &DensityField) -> Result<()> {
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

// ---- checkpoint reload -------------------------------------------------------------

/// Rebuilds the model a checkpoint was trained with (kind plus architecture
/// settings from its metadata) and restores the parameters.
pub fn load_model_checkpoint(path: &Path) -> Result<(OperatorModel, ParameterVector)> {
    let bundle = crate::data::read_bundle(path)?;
    let kind_str = bundle
        .meta
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Format("checkpoint metadata lacks a model kind".into()))?;
    let kind = ModelKind::from_str(kind_str)?;
    let settings = match bundle.meta.get("settings") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => ModelSettings::for_kind(kind),
    };
    let model = OperatorModel::with_settings(kind, &settings)?;
    let (pv, _, _) = train::load_checkpoint(path, &model)?;
    Ok((model, pv))
}

// ---- ablations ---------------------------------------------------------------------

/// Architecture axes the ablation sweep can vary, one grid per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    LayerNorm,
    PoolOrder,
    KernelShape,
    Channels,
    FilterLayers,
}

impl AblationKind {
    pub fn label(self) -> &'static str {
        match self {
            AblationKind::LayerNorm => "layernorm",
            AblationKind::PoolOrder => "pool_order",
            AblationKind::KernelShape => "kernel_shape",
            AblationKind::Channels => "channels",
            AblationKind::FilterLayers => "filter_layers",
        }
    }

    pub const ALL: [AblationKind; 5] = [
        AblationKind::LayerNorm,
        AblationKind::PoolOrder,
        AblationKind::KernelShape,
        AblationKind::Channels,
        AblationKind::FilterLayers,
    ];
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "layernorm" | "layer_norm" => Ok(AblationKind::LayerNorm),
            "pool_order" | "poolorder" => Ok(AblationKind::PoolOrder),
            "kernel_shape" | "kernel" => Ok(AblationKind::KernelShape),
            "channels" => Ok(AblationKind::Channels),
            "filter_layers" | "filters" => Ok(AblationKind::FilterLayers),
            _ => Err(Error::Config(format!("unknown ablation kind: {s}"))),
        }
    }
}

/// Labeled settings variants for one ablation axis, starting from `base`.
pub fn ablation_grid(kind: AblationKind, base: &ModelSettings) -> Vec<(String, ModelSettings)> {
    let with = |label: String, f: &dyn Fn(&mut ModelSettings)| {
        let mut s = base.clone();
        f(&mut s);
        (label, s)
    };
    match kind {
        AblationKind::LayerNorm => [true, false]
            .iter()
            .map(|&on| {
                with(format!("layer_norm={}", if on { "on" } else { "off" }), &|s| {
                    s.layer_norm = on
                })
            })
            .collect(),
        AblationKind::PoolOrder => {
            use crate::nets::PoolOrder;
            [
                ("pool_then_activation", PoolOrder::PoolThenActivation),
                ("activation_then_pool", PoolOrder::ActivationThenPool),
            ]
            .iter()
            .map(|&(label, order)| with(label.to_string(), &|s| s.pool_order = order))
            .collect()
        }
        AblationKind::KernelShape => [(1, 2), (2, 2), (2, 4)]
            .iter()
            .map(|&k| with(format!("kernel={}x{}", k.0, k.1), &|s| s.kernel = k))
            .collect(),
        AblationKind::Channels => [2, 4, 6]
            .iter()
            .map(|&c| with(format!("channels={c}"), &|s| s.channels = c))
            .collect(),
        AblationKind::FilterLayers => [1, 2]
            .iter()
            .map(|&n| with(format!("filter_layers={n}"), &|s| s.filter_layers = n))
            .collect(),
    }
}

/// Runs one experiment per grid variant, collecting the rows into
/// `<out_dir>/ablation_<kind>.csv` alongside the per-variant run directories.
/// Only convolutional kinds expose the ablated knobs.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    base.validate()?;
    if !base.model.conv_branch() {
        return Err(Error::Config(format!(
            "ablation grids vary the convolutional branch; {} has none",
            base.model.label()
        )));
    }
    let table = base.out_dir.join(format!("ablation_{}.csv", kind.label()));
    let mut rows = Vec::new();
    for (label, settings) in ablation_grid(kind, &base.effective_settings()) {
        let mut cfg = base.clone();
        cfg.settings = Some(settings);
        cfg.label = Some(format!("{}[{label}]", base.method()));
        cfg.out_dir = base.out_dir.join(sanitize(&label));
        let row = run_experiment(&cfg)?;
        append_result(&table, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

// ---- timing ------------------------------------------------------------------------

/// Wall-time summary over repetitions; zero reps leave zeroed stats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl TimingStats {
    fn from_millis(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return TimingStats { reps: 0, mean_ms: 0.0, std_ms: 0.0 };
        }
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = if ms.len() > 1 {
            ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        TimingStats { reps: ms.len(), mean_ms: mean, std_ms: var.sqrt() }
    }
}

/// Times full density-grid predictions, cycling through the given input
/// functions one per repetition.
pub fn time_inference(
    model: &OperatorModel,
    pv: &ParameterVector,
    inputs: &[Array2<f64>],
    ts: &[f64],
    xs: &[f64],
    reps: usize,
) -> Result<TimingStats> {
    if inputs.is_empty() {
        return Err(Error::Config("timing needs at least one input function".into()));
    }
    let mut ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let t0 = Instant::now();
        let out = predict_rho_grid(model, pv, &inputs[i % inputs.len()], ts, xs)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out);
    }
    Ok(TimingStats::from_millis(&ms))
}

/// Times the kinetic reference solver on the same terms, cycling through the
/// given initial samples.
pub fn time_reference(
    spec: &ProblemSpec,
    ref_nx: usize,
    samples: &[InitialFunctionSample],
    reps: usize,
) -> Result<TimingStats> {
    if samples.is_empty() {
        return Err(Error::Config("timing needs at least one initial sample".into()));
    }
    let grid = KineticGrid::for_problem(spec, ref_nx)?;
    let mut ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let t0 = Instant::now();
        let out = solve_transport_ap(spec, &grid, &samples[i % samples.len()])?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out);
    }
    Ok(TimingStats::from_millis(&ms))
}

#[cfg(test)]
mod tests;
