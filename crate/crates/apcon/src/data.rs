//! Datasets of discretized initial distributions. Random fields drawn from a
//! squared-exponential Gaussian process are composed into boundary-compatible
//! initial conditions on the fixed sensor grid, split into train and test
//! parts, and persisted in a self-describing binary container.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{sensor_v_grid, sensor_x_grid, SENSOR_SHAPE};

/// Squared-exponential covariance between two grid points.
pub fn sq_exp_kernel(z: (f64, f64), y: (f64, f64), l: f64) -> f64 {
    let d2 = (z.0 - y.0).powi(2) + (z.1 - y.1).powi(2);
    (-d2 / (2.0 * l * l)).exp()
}

/// Sensor coordinates (x, v) in flattening order (x-major).
pub fn sensor_grid_points(x_range: (f64, f64)) -> Vec<(f64, f64)> {
    let xs = sensor_x_grid(x_range);
    let vs = sensor_v_grid();
    let mut pts = Vec::with_capacity(xs.len() * vs.len());
    for &x in &xs {
        for &v in &vs {
            pts.push((x, v));
        }
    }
    pts
}

/// Mean-zero Gaussian random field sampler with a cached covariance factor.
pub struct GrfSampler {
    points: Vec<(f64, f64)>,
    l: f64,
    factor: DMatrix<f64>,
    /// Diagonal jitter that made the factorization succeed.
    pub jitter: f64,
}

impl GrfSampler {
    pub fn new(points: Vec<(f64, f64)>, l: f64) -> Result<Self> {
        if !(l > 0.0) {
            return Err(Error::Config(format!("kernel length must be positive, got {l}")));
        }
        if points.is_empty() {
            return Err(Error::Config("empty grid for random field".into()));
        }
        let n = points.len();
        let base = DMatrix::from_fn(n, n, |i, j| sq_exp_kernel(points[i], points[j], l));
        let mut tried = 0;
        for jitter in [1e-6, 1e-5, 1e-4] {
            tried += 1;
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(chol) = nalgebra::linalg::Cholesky::new(k) {
                return Ok(GrfSampler {
                    points,
                    l,
                    factor: chol.l(),
                    jitter,
                });
            }
        }
        Err(Error::NonConvergence {
            what: "covariance factorization under jitter escalation".into(),
            iterations: tried,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length_scale(&self) -> f64 {
        self.l
    }

    /// One field draw, ordered like the construction points.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.sample_many(1, rng).row(0).to_vec()
    }

    /// `count` independent draws, one per row.
    pub fn sample_many(&self, count: usize, rng: &mut impl Rng) -> Array2<f64> {
        let n = self.len();
        let xi = DMatrix::from_fn(n, count, |_, _| StandardNormal.sample(rng));
        let fields = &self.factor * xi;
        Array2::from_shape_fn((count, n), |(s, i)| fields[(i, s)])
    }
}

/// One-shot field draw; builds and discards the factor.
pub fn grf_sample(points: &[(f64, f64)], l: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(GrfSampler::new(points.to_vec(), l)?.sample(rng))
}

// ---- initial samples ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemId {
    I,
    II,
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemId::I => "I",
            ProblemId::II => "II",
        })
    }
}

impl FromStr for ProblemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(ProblemId::I),
            "II" | "2" => Ok(ProblemId::II),
            _ => Err(Error::Config(format!("unknown problem id: {s}"))),
        }
    }
}

/// One discretized initial distribution on the sensor grid; rows follow x,
/// columns follow v.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialFunctionSample {
    pub values: Array2<f64>,
    pub x_grid: Vec<f64>,
    pub v_grid: Vec<f64>,
    pub problem_id: ProblemId,
}

impl InitialFunctionSample {
    /// Checks the per-problem boundary and sign invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = SENSOR_SHAPE;
        if self.values.dim() != (h, w) || self.x_grid.len() != h || self.v_grid.len() != w {
            return Err(Error::Shape(format!(
                "sample shape {:?} does not match the sensor grid",
                self.values.dim()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial sample".into()));
        }
        match self.problem_id {
            ProblemId::I => {
                if self.values.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Config("inflow sample is not strictly positive".into()));
                }
                for (j, &v) in self.v_grid.iter().enumerate() {
                    if v > 0.0 && (self.values[[0, j]] - 1.0).abs() > 1e-12 {
                        return Err(Error::Config(format!(
                            "left wall value {} != 1 at v = {v}",
                            self.values[[0, j]]
                        )));
                    }
                    if v < 0.0 && (self.values[[h - 1, j]] - 0.5).abs() > 1e-12 {
                        return Err(Error::Config(format!(
                            "right wall value {} != 1/2 at v = {v}",
                            self.values[[h - 1, j]]
                        )));
                    }
                }
            }
            ProblemId::II => {
                if self.values.iter().any(|&v| v < 0.0) {
                    return Err(Error::Config("absorbing sample has negative values".into()));
                }
                for j in 0..w {
                    if self.values[[0, j]] != 0.0 || self.values[[h - 1, j]] != 0.0 {
                        return Err(Error::Config("absorbing sample nonzero at a wall".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Bilinear interpolation in (x, v); coordinates are clamped to the grid.
    pub fn interp(&self, x: f64, v: f64) -> f64 {
        let locate = |grid: &[f64], c: f64| -> (usize, f64) {
            let n = grid.len();
            if c <= grid[0] {
                return (0, 0.0);
            }
            if c >= grid[n - 1] {
                return (n - 2, 1.0);
            }
            let mut i = match grid.binary_search_by(|g| g.partial_cmp(&c).expect("finite grid")) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            if i > n - 2 {
                i = n - 2;
            }
            (i, (c - grid[i]) / (grid[i + 1] - grid[i]))
        };
        let (i, sx) = locate(&self.x_grid, x);
        let (j, sv) = locate(&self.v_grid, v);
        let f = &self.values;
        (1.0 - sx) * ((1.0 - sv) * f[[i, j]] + sv * f[[i, j + 1]])
            + sx * ((1.0 - sv) * f[[i + 1, j]] + sv * f[[i + 1, j + 1]])
    }

    /// Flattened copy in sensor order (x-major), one row.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "x\\v")?;
        for v in &self.v_grid {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
        for (i, x) in self.x_grid.iter().enumerate() {
            write!(w, "{x}")?;
            for j in 0..self.v_grid.len() {
                write!(w, ",{}", self.values[[i, j]])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Stacks samples into rows for batched branch input.
pub fn to_rows(samples: &[InitialFunctionSample]) -> Array2<f64> {
    let (h, w) = SENSOR_SHAPE;
    let mut rows = Array2::zeros((samples.len(), h * w));
    for (s, sample) in samples.iter().enumerate() {
        for ((i, j), &val) in sample.values.indexed_iter() {
            rows[[s, i * w + j]] = val;
        }
    }
    rows
}

fn relu3(v: f64) -> f64 {
    let r = v.max(0.0);
    r * r * r
}

/// Blend factor that vanishes at incoming boundary points, so the wall
/// values are met exactly no matter what the random field does.
fn inflow_blend(x: f64, v: f64) -> f64 {
    relu3(v) * x + relu3(-v) * (1.0 - x)
}

fn compose_problem1(field: &[f64], xs: &[f64], vs: &[f64]) -> Array2<f64> {
    let (h, w) = (xs.len(), vs.len());
    Array2::from_shape_fn((h, w), |(i, j)| {
        inflow_blend(xs[i], vs[j]) * field[i * w + j] + (1.0 - xs[i] / 2.0)
    })
}

const MAX_REJECTIONS: usize = 100;

/// Draws inflow-compatible initial data: a random field modulated to vanish
/// at the incoming boundary points, redrawn until strictly positive.
pub fn make_problem1_initial(
    sampler: &GrfSampler,
    rng: &mut impl Rng,
) -> Result<InitialFunctionSample> {
    let xs = sensor_x_grid((0.0, 1.0));
    let vs = sensor_v_grid();
    for _ in 0..=MAX_REJECTIONS {
        let field = sampler.sample(rng);
        let values = compose_problem1(&field, &xs, &vs);
        if values.iter().all(|&f| f > 0.0) {
            return Ok(InitialFunctionSample {
                values,
                x_grid: xs,
                v_grid: vs,
                problem_id: ProblemId::I,
            });
        }
    }
    Err(Error::Config(format!(
        "no positive inflow sample after {MAX_REJECTIONS} rejections"
    )))
}

fn problem2_value(r: f64, x: f64, v: f64) -> f64 {
    let phase = 1.0 + (2.0 * std::f64::consts::PI * x - std::f64::consts::FRAC_PI_2).sin();
    let maxwell = 3.0 * (-(3.0 * v) * (3.0 * v) / 2.0).exp();
    r * phase * maxwell
}

/// Scaled-Maxwellian initial data: r [1 + sin(2 pi x - pi/2)] 3 exp(-(3v)^2/2)
/// with r uniform on [0, 1]; vanishes at both walls by construction.
pub fn make_problem2_initial(rng: &mut impl Rng) -> InitialFunctionSample {
    let xs = sensor_x_grid((0.0, 1.0));
    let vs = sensor_v_grid();
    let r: f64 = rng.gen();
    let values = Array2::from_shape_fn(SENSOR_SHAPE, |(i, j)| problem2_value(r, xs[i], vs[j]));
    InitialFunctionSample {
        values,
        x_grid: xs,
        v_grid: vs,
        problem_id: ProblemId::II,
    }
}

/// Generates `m` samples for one problem family. Inflow samples are drawn in
/// batched rejection rounds against a shared covariance factor, so the whole
/// dataset costs one factorization; everything is a pure function of `seed`.
pub fn generate(problem: ProblemId, m: usize, l: f64, seed: u64) -> Result<Vec<InitialFunctionSample>> {
    if m == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match problem {
        ProblemId::II => Ok((0..m).map(|_| make_problem2_initial(&mut rng)).collect()),
        ProblemId::I => {
            let xs = sensor_x_grid((0.0, 1.0));
            let vs = sensor_v_grid();
            let sampler = GrfSampler::new(sensor_grid_points((0.0, 1.0)), l)?;
            let mut out: Vec<Option<InitialFunctionSample>> = vec![None; m];
            for _round in 0..=MAX_REJECTIONS {
                let open: Vec<usize> = (0..m).filter(|&i| out[i].is_none()).collect();
                if open.is_empty() {
                    return Ok(out.into_iter().map(|s| s.expect("filled")).collect());
                }
                let fields = sampler.sample_many(open.len(), &mut rng);
                for (row, &slot) in open.iter().enumerate() {
                    let values = compose_problem1(fields.row(row).as_slice().expect("row"), &xs, &vs);
                    if values.iter().all(|&f| f > 0.0) {
                        out[slot] = Some(InitialFunctionSample {
                            values,
                            x_grid: xs.clone(),
                            v_grid: vs.clone(),
                            problem_id: ProblemId::I,
                        });
                    }
                }
            }
            Err(Error::Config(format!(
                "no positive inflow sample after {MAX_REJECTIONS} rejections"
            )))
        }
    }
}

// ---- dataset split and persistence ---------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub m: usize,
    pub l: f64,
    pub seed: u64,
    pub split_ratio: (usize, usize),
    pub kernel: String,
    pub problem: ProblemId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<InitialFunctionSample>,
    pub test: Vec<InitialFunctionSample>,
    pub meta: DatasetMeta,
}

/// Splits samples by a seeded shuffle; the integer remainder goes to train.
pub fn split(
    samples: Vec<InitialFunctionSample>,
    ratio: (usize, usize),
    meta: DatasetMeta,
) -> Result<Dataset> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Config(format!("split ratio must be positive, got {ratio:?}")));
    }
    let m = samples.len();
    let n_test = m * ratio.1 / (ratio.0 + ratio.1);
    if n_test == 0 || n_test == m {
        return Err(Error::Config(format!(
            "split {ratio:?} leaves an empty part for {m} samples"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed ^ 0x5eed_5917);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut train = Vec::with_capacity(m - n_test);
    let mut test = Vec::with_capacity(n_test);
    let mut samples: Vec<Option<InitialFunctionSample>> = samples.into_iter().map(Some).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let s = samples[idx].take().expect("each index once");
        if pos < m - n_test {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok(Dataset { train, test, meta })
}

/// Generates and splits a dataset in one step.
pub fn build_dataset(problem: ProblemId, m: usize, l: f64, seed: u64) -> Result<Dataset> {
    let samples = generate(problem, m, l, seed)?;
    let meta = DatasetMeta {
        m,
        l,
        seed,
        split_ratio: (7, 1),
        kernel: "squared-exponential".into(),
        problem,
    };
    split(samples, (7, 1), meta)
}

// ---- binary container -------------------------------------------------------------

/// Named 2-d arrays plus a JSON metadata blob; the one on-disk format shared
/// by datasets and solver output fields.
pub struct ArrayBundle {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array2<f64>)>,
}

const BUNDLE_MAGIC: &[u8; 4] = b"APBN";

pub fn write_bundle(path: &Path, bundle: &ArrayBundle) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    let meta = serde_json::to_vec(&bundle.meta)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(bundle.arrays.len() as u64).to_le_bytes())?;
    for (name, arr) in &bundle.arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.nrows() as u64).to_le_bytes())?;
        w.write_all(&(arr.ncols() as u64).to_le_bytes())?;
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_bundle(path: &Path) -> Result<ArrayBundle> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format("bad bundle magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = serde_json::from_slice(&meta_bytes)?;
    let n_arrays = read_u64(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut vals = vec![0.0f64; rows * cols];
        for v in vals.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let arr = Array2::from_shape_vec((rows, cols), vals)
            .map_err(|e| Error::Format(format!("array {name}: {e}")))?;
        arrays.push((name, arr));
    }
    Ok(ArrayBundle { meta, arrays })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = SENSOR_SHAPE;
        let first = self
            .train
            .first()
            .or(self.test.first())
            .ok_or_else(|| Error::Config("empty dataset".into()))?;
        let grid_row = |g: &[f64]| Array2::from_shape_vec((1, g.len()), g.to_vec()).expect("grid row");
        let stack = |list: &[InitialFunctionSample]| -> Array2<f64> {
            let mut m = Array2::zeros((list.len(), h * w));
            for (s, sample) in list.iter().enumerate() {
                for ((i, j), &val) in sample.values.indexed_iter() {
                    m[[s, i * w + j]] = val;
                }
            }
            m
        };
        let bundle = ArrayBundle {
            meta: serde_json::to_value(&self.meta)?,
            arrays: vec![
                ("x_grid".into(), grid_row(&first.x_grid)),
                ("v_grid".into(), grid_row(&first.v_grid)),
                ("train".into(), stack(&self.train)),
                ("test".into(), stack(&self.test)),
            ],
        };
        write_bundle(path, &bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bundle = read_bundle(path)?;
        let meta: DatasetMeta = serde_json::from_value(bundle.meta.clone())?;
        let mut arrays: std::collections::HashMap<String, Array2<f64>> =
            bundle.arrays.into_iter().collect();
        let mut take = |name: &str| -> Result<Array2<f64>> {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("bundle is missing array {name}")))
        };
        let x_grid = take("x_grid")?.row(0).to_vec();
        let v_grid = take("v_grid")?.row(0).to_vec();
        let (h, w) = SENSOR_SHAPE;
        let unstack = |m: Array2<f64>| -> Result<Vec<InitialFunctionSample>> {
            if m.ncols() != h * w {
                return Err(Error::Shape(format!(
                    "stored samples have {} entries, expected {}",
                    m.ncols(),
                    h * w
                )));
            }
            Ok((0..m.nrows())
                .map(|s| InitialFunctionSample {
                    values: Array2::from_shape_fn((h, w), |(i, j)| m[[s, i * w + j]]),
                    x_grid: x_grid.clone(),
                    v_grid: v_grid.clone(),
                    problem_id: meta.problem,
                })
                .collect())
        };
        let train = unstack(take("train")?)?;
        let test = unstack(take("test")?)?;
        Ok(Dataset { train, test, meta })
    }
}

#[cfg(test)]
mod tests;
