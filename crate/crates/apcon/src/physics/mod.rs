//! Physical unknowns, residuals, and empirical risks for the scaled linear
//! transport equation
//!
//!   eps df/dt + v df/dx = (1/eps) (<f> - f) + eps Q,
//!
//! where <.> averages over velocities v in [-1, 1]. Three parameterizations
//! are supported: a single positive distribution f; a micro-macro pair
//! (rho, g) with f = rho + eps g and <g> = 0 built in; and an even-odd
//! triple (rho, r, j) with f = r + eps j, r even and j odd in v by
//! construction. The latter two stay well behaved as eps -> 0, where the
//! density obeys d(rho)/dt = (1/3) d2(rho)/dx2 + Q.
//!
//! Residuals are assembled on column blocks: each space-time point carries
//! its quadrature nodes plus the sampled velocity (and its mirror for the
//! even-odd split), so velocity averages, pointwise values, and input
//! derivatives all come out of one network pass.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeRef, Tape, Unary, MAX_TAN};
use crate::error::{Error, Result};
use crate::nets::{
    branch_tape, combine_tape, register_deeponet, trunk_tape, BranchConfig, ConvBranchConfig,
    DeepOnetConfig, DeepOnetSegments, FilterLayerConfig, ModifiedMlpConfig, PoolOrder,
};
use crate::params::{ParameterLayout, ParameterVector};
use crate::quadrature::GaussLegendre;

/// Sensor grid of the input functions: (x resolution, v resolution).
pub const SENSOR_SHAPE: (usize, usize) = (32, 64);
/// Gauss-Legendre node count shared by every velocity average.
pub const VELOCITY_NODES: usize = 32;
/// Rank of the branch-trunk inner product.
pub const INTERACTION_DIM: usize = 64;

const MLP_WIDTH: usize = 64;
const BRANCH_HIDDEN: usize = 5;
const TRUNK_HIDDEN: usize = 4;

// ---- model kinds -------------------------------------------------------------

/// How networks map to physical unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// One net for the full distribution, f = softplus(G).
    Full,
    /// Density plus centered fluctuation: f = rho + eps g, <g> = 0.
    MicroMacro,
    /// Density plus even/odd parts: f = r + eps j.
    EvenOdd,
}

/// The six operator-model variants: three parameterizations, each with a
/// dense or a convolutional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Pidon,
    Picon,
    ApdonV1,
    ApconV1,
    ApdonV2,
    ApconV2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Pidon,
        ModelKind::Picon,
        ModelKind::ApdonV1,
        ModelKind::ApconV1,
        ModelKind::ApdonV2,
        ModelKind::ApconV2,
    ];

    pub fn family(self) -> ModelFamily {
        match self {
            ModelKind::Pidon | ModelKind::Picon => ModelFamily::Full,
            ModelKind::ApdonV1 | ModelKind::ApconV1 => ModelFamily::MicroMacro,
            ModelKind::ApdonV2 | ModelKind::ApconV2 => ModelFamily::EvenOdd,
        }
    }

    /// Convolutional branch (true) or dense branch (false).
    pub fn conv_branch(self) -> bool {
        matches!(
            self,
            ModelKind::Picon | ModelKind::ApconV1 | ModelKind::ApconV2
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Pidon => "PIDON",
            ModelKind::Picon => "PICON",
            ModelKind::ApdonV1 => "APDON-v1",
            ModelKind::ApconV1 => "APCON-v1",
            ModelKind::ApdonV2 => "APDON-v2",
            ModelKind::ApconV2 => "APCON-v2",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "PIDON" => Ok(ModelKind::Pidon),
            "PICON" => Ok(ModelKind::Picon),
            "APDON_V1" => Ok(ModelKind::ApdonV1),
            "APCON_V1" => Ok(ModelKind::ApconV1),
            "APDON_V2" => Ok(ModelKind::ApdonV2),
            "APCON_V2" => Ok(ModelKind::ApconV2),
            _ => Err(Error::Config(format!("unknown model kind: {s}"))),
        }
    }
}

/// Architecture knobs that the ablations vary. `Default` gives the standard
/// configuration; layer norm defaults on for convolutional kinds only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub layer_norm: bool,
    pub filter_layers: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub pool: (usize, usize),
    pub pool_order: PoolOrder,
}

impl ModelSettings {
    pub fn for_kind(kind: ModelKind) -> Self {
        ModelSettings {
            layer_norm: kind.conv_branch(),
            filter_layers: 2,
            channels: 4,
            kernel: (2, 2),
            pool: (2, 2),
            pool_order: PoolOrder::PoolThenActivation,
        }
    }
}

fn trunk_config(input_dim: usize, layer_norm: bool) -> ModifiedMlpConfig {
    ModifiedMlpConfig {
        input_dim,
        width: MLP_WIDTH,
        hidden_layers: TRUNK_HIDDEN,
        output_dim: INTERACTION_DIM,
        activation: crate::autodiff::Activation::Swish,
        layer_norm,
    }
}

fn dense_branch_config(layer_norm: bool) -> ModifiedMlpConfig {
    ModifiedMlpConfig {
        input_dim: SENSOR_SHAPE.0 * SENSOR_SHAPE.1,
        width: MLP_WIDTH,
        hidden_layers: BRANCH_HIDDEN,
        output_dim: INTERACTION_DIM,
        activation: crate::autodiff::Activation::Swish,
        layer_norm,
    }
}

fn conv_branch_config(s: &ModelSettings) -> ConvBranchConfig {
    let layer = FilterLayerConfig {
        channels: s.channels,
        kernel: s.kernel,
        stride: s.kernel,
        pool: s.pool,
        pool_stride: s.pool,
        order: s.pool_order,
        activation: crate::autodiff::Activation::Gelu,
    };
    ConvBranchConfig {
        input_shape: SENSOR_SHAPE,
        filter_layers: vec![layer; s.filter_layers],
        lift_width: MLP_WIDTH,
        mlp: ModifiedMlpConfig {
            input_dim: MLP_WIDTH,
            width: MLP_WIDTH,
            hidden_layers: BRANCH_HIDDEN,
            output_dim: INTERACTION_DIM,
            activation: crate::autodiff::Activation::Swish,
            layer_norm: s.layer_norm,
        },
    }
}

/// One operator network with its registered parameter segments.
#[derive(Debug, Clone)]
pub struct OperatorNet {
    pub name: &'static str,
    pub config: DeepOnetConfig,
    pub segments: DeepOnetSegments,
}

/// A complete operator model: one, two, or three DeepONets sharing a single
/// flat parameter vector, plus the velocity quadrature.
#[derive(Debug, Clone)]
pub struct OperatorModel {
    pub kind: ModelKind,
    pub settings: ModelSettings,
    pub quad: GaussLegendre,
    pub nets: Vec<OperatorNet>,
    pub layout: Arc<ParameterLayout>,
}

impl OperatorModel {
    pub fn new(kind: ModelKind) -> Result<Self> {
        Self::with_settings(kind, &ModelSettings::for_kind(kind))
    }

    pub fn with_settings(kind: ModelKind, settings: &ModelSettings) -> Result<Self> {
        // net order fixes trunk-input dims: density sees (t,x), the velocity
        // dependent unknowns see (t,x,v)
        let specs: &[(&'static str, usize)] = match kind.family() {
            ModelFamily::Full => &[("f", 3)],
            ModelFamily::MicroMacro => &[("rho", 2), ("g", 3)],
            ModelFamily::EvenOdd => &[("rho", 2), ("r", 3), ("j", 3)],
        };
        let mut layout = ParameterLayout::new();
        let mut nets = Vec::new();
        for &(name, dim) in specs {
            let branch = if kind.conv_branch() {
                BranchConfig::Conv(conv_branch_config(settings))
            } else {
                BranchConfig::Dense(dense_branch_config(false))
            };
            let config = DeepOnetConfig {
                branch,
                trunk: trunk_config(dim, settings.layer_norm),
                p: INTERACTION_DIM,
            };
            let segments = register_deeponet(&mut layout, name, &config)?;
            nets.push(OperatorNet {
                name,
                config,
                segments,
            });
        }
        Ok(OperatorModel {
            kind,
            settings: settings.clone(),
            quad: GaussLegendre::new(VELOCITY_NODES)?,
            nets,
            layout: Arc::new(layout),
        })
    }

    pub fn init_params(&self, seed: u64) -> ParameterVector {
        ParameterVector::init(self.layout.clone(), seed)
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    fn check_params(&self, pv: &ParameterVector) -> Result<()> {
        if !Arc::ptr_eq(&self.layout, &pv.layout) && self.layout.total_len() != pv.layout.total_len()
        {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries but the model needs {}",
                pv.layout.total_len(),
                self.layout.total_len()
            )));
        }
        Ok(())
    }

    /// Branch + trunk + inner product of net `i` on an input-coordinate node.
    fn apply_net(
        &self,
        tape: &mut Tape,
        pv: &ParameterVector,
        i: usize,
        branch: NodeRef,
        y: NodeRef,
    ) -> NodeRef {
        let net = &self.nets[i];
        let t = trunk_tape(tape, &net.config, pv, &net.segments, y);
        combine_tape(tape, pv, &net.segments, branch, t)
    }
}

// ---- problem description -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Prescribed incoming distribution: `left_value` for v > 0 at x_L,
    /// `right_value` for v < 0 at x_R.
    Inflow { left_value: f64, right_value: f64 },
    /// The same prescribed value at both walls, any velocity.
    Dirichlet { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Scaling parameter, domain, boundary data, and source of one transport
/// problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub eps: f64,
    pub t_max: f64,
    pub x_range: (f64, f64),
    pub boundary: BoundaryCondition,
    /// Velocity-independent source Q(t, x); `None` means zero.
    #[serde(skip)]
    pub source: Option<fn(f64, f64) -> f64>,
}

impl ProblemSpec {
    /// Inflow benchmark: walls held at 1 (left) and 1/2 (right) on x in [0,1].
    /// The horizon is 0.5 in the kinetic regime and 0.1 otherwise.
    pub fn problem_i(eps: f64) -> Self {
        ProblemSpec {
            eps,
            t_max: if eps >= 0.5 { 0.5 } else { 0.1 },
            x_range: (0.0, 1.0),
            boundary: BoundaryCondition::Inflow {
                left_value: 1.0,
                right_value: 0.5,
            },
            source: None,
        }
    }

    /// Absorbing benchmark: zero walls on x in [0,1], horizon 0.1.
    pub fn problem_ii(eps: f64) -> Self {
        ProblemSpec {
            eps,
            t_max: 0.1,
            x_range: (0.0, 1.0),
            boundary: BoundaryCondition::Dirichlet { value: 0.0 },
            source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::Config(format!(
                "t_max must be positive, got {}",
                self.t_max
            )));
        }
        if !(self.x_range.0 < self.x_range.1) {
            return Err(Error::Config(format!(
                "x range must be increasing, got ({}, {})",
                self.x_range.0, self.x_range.1
            )));
        }
        Ok(())
    }

    pub fn source_at(&self, t: f64, x: f64) -> f64 {
        self.source.map_or(0.0, |q| q(t, x))
    }

    pub fn wall_x(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.x_range.0,
            Side::Right => self.x_range.1,
        }
    }

    /// The value the reconstructed distribution must meet at a wall.
    pub fn prescribed(&self, side: Side) -> f64 {
        match self.boundary {
            BoundaryCondition::Inflow {
                left_value,
                right_value,
            } => match side {
                Side::Left => left_value,
                Side::Right => right_value,
            },
            BoundaryCondition::Dirichlet { value } => value,
        }
    }

    fn check_boundary_velocity(&self, side: Side, v: f64) -> Result<()> {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(Error::Config(format!("boundary velocity {v} outside [-1, 1]")));
        }
        if let BoundaryCondition::Inflow { .. } = self.boundary {
            let ok = match side {
                Side::Left => v > 0.0,
                Side::Right => v < 0.0,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "inflow boundary at {side:?} needs {} velocities, got {v}",
                    if side == Side::Left { "incoming (v > 0)" } else { "incoming (v < 0)" },
                )));
            }
        }
        Ok(())
    }
}

// ---- collocation -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub t: f64,
    pub v: f64,
    pub side: Side,
}

/// Sample points for the three risk groups. Any group may be empty; its term
/// is then skipped, which is how partial risks (and memory-bounded chunked
/// gradients) are evaluated.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CollocationBatch {
    pub interior: Vec<(f64, f64, f64)>,
    pub boundary: Vec<BoundaryPoint>,
    /// Grid coordinates (x_j, v_j) of the discretized initial functions.
    pub initial: Vec<(f64, f64)>,
}

impl CollocationBatch {
    pub fn len(&self) -> usize {
        self.interior.len() + self.boundary.len() + self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("empty collocation batch".into()));
        }
        let (xl, xr) = problem.x_range;
        for &(t, x, v) in &self.interior {
            let open = t > 0.0 && t < problem.t_max && x > xl && x < xr && v > -1.0 && v < 1.0;
            if !open || !(t.is_finite() && x.is_finite() && v.is_finite()) {
                return Err(Error::Config(format!(
                    "interior point ({t}, {x}, {v}) outside the open domain"
                )));
            }
        }
        for p in &self.boundary {
            if !p.t.is_finite() || p.t < 0.0 || p.t > problem.t_max {
                return Err(Error::Config(format!(
                    "boundary time {} outside [0, {}]",
                    p.t, problem.t_max
                )));
            }
            problem.check_boundary_velocity(p.side, p.v)?;
        }
        locate_grid_points(problem.x_range, &self.initial)?;
        Ok(())
    }
}

// ---- input-function batches ---------------------------------------------------

/// A batch of discretized input functions: `inputs` feeds the branches one
/// flattened sample per column, `targets` holds the same values per row for
/// the initial-data residual.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl SampleBatch {
    pub fn from_images(images: &[Array2<f64>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("empty sample batch".into()));
        }
        let (h, w) = SENSOR_SHAPE;
        let mut inputs = Array2::zeros((h * w, images.len()));
        for (b, img) in images.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "sample {b} has shape {:?}, expected {:?}",
                    img.dim(),
                    (h, w)
                )));
            }
            for ((i, j), &val) in img.indexed_iter() {
                inputs[[i * w + j, b]] = val;
            }
        }
        let targets = inputs.t().to_owned();
        Ok(SampleBatch { inputs, targets })
    }

    /// Builds from stacked rows, one flattened sample per row.
    pub fn from_rows(rows: &Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Config("empty sample batch".into()));
        }
        let (h, w) = SENSOR_SHAPE;
        if rows.ncols() != h * w {
            return Err(Error::Shape(format!(
                "sample rows have {} entries, expected {}",
                rows.ncols(),
                h * w
            )));
        }
        Ok(SampleBatch {
            inputs: rows.t().to_owned(),
            targets: rows.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---- sensor grids --------------------------------------------------------------

/// Spatial sensor grid: SENSOR_SHAPE.0 uniform points including both walls.
pub fn sensor_x_grid(x_range: (f64, f64)) -> Vec<f64> {
    let n = SENSOR_SHAPE.0;
    (0..n)
        .map(|i| x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Velocity sensor grid: SENSOR_SHAPE.1 uniform points on [-1, 1], mirrored
/// so that v[n-1-j] = -v[j] holds bit for bit.
pub fn sensor_v_grid() -> Vec<f64> {
    let n = SENSOR_SHAPE.1;
    let mut v = vec![0.0; n];
    for j in 0..n / 2 {
        let t = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
        v[j] = t;
        v[n - 1 - j] = -t;
    }
    v
}

/// All (x_j, v_j) sensor coordinates in flattening order.
pub fn initial_grid(x_range: (f64, f64)) -> Vec<(f64, f64)> {
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

/// Maps grid coordinates back to flat sensor indices; errors on any point
/// that is not a sensor coordinate.
pub fn locate_grid_points(x_range: (f64, f64), pts: &[(f64, f64)]) -> Result<Vec<usize>> {
    let xs = sensor_x_grid(x_range);
    let vs = sensor_v_grid();
    let tol_x = 1e-9 * (x_range.1 - x_range.0).abs().max(1.0);
    let find = |grid: &[f64], val: f64, tol: f64| -> Option<usize> {
        grid.iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - val)
                    .abs()
                    .partial_cmp(&(b.1 - val).abs())
                    .expect("finite grid distance")
            })
            .filter(|(_, &g)| (g - val).abs() <= tol)
            .map(|(i, _)| i)
    };
    pts.iter()
        .map(|&(x, v)| {
            if !x.is_finite() || !v.is_finite() {
                return Err(Error::Config(format!("grid point ({x}, {v}) is not finite")));
            }
            let ix = find(&xs, x, tol_x)
                .ok_or_else(|| Error::Config(format!("x = {x} is not a sensor coordinate")))?;
            let iv = find(&vs, v, 1e-9)
                .ok_or_else(|| Error::Config(format!("v = {v} is not a sensor coordinate")))?;
            Ok(ix * SENSOR_SHAPE.1 + iv)
        })
        .collect()
}

// ---- velocity blocks -----------------------------------------------------------

/// Column layout of one batch of interior points: every point occupies `k`
/// consecutive columns holding the quadrature nodes, the sampled velocity,
/// and (two-sided) its mirror. Weights are zero on non-node columns.
#[derive(Debug, Clone)]
pub struct VelocityBlocks {
    pub k: usize,
    pub v_samples: Vec<f64>,
    pub v_cols: Vec<f64>,
    pub weights: Vec<f64>,
    pub mirror: Option<Vec<usize>>,
}

impl VelocityBlocks {
    /// Nodes plus the sampled velocity.
    pub fn one_sided(v_samples: &[f64], quad: &GaussLegendre) -> Self {
        let nn = quad.len();
        let k = nn + 1;
        let mut v_cols = Vec::with_capacity(v_samples.len() * k);
        for &v in v_samples {
            v_cols.extend_from_slice(quad.nodes());
            v_cols.push(v);
        }
        let mut weights = quad.weights().to_vec();
        weights.push(0.0);
        VelocityBlocks {
            k,
            v_samples: v_samples.to_vec(),
            v_cols,
            weights,
            mirror: None,
        }
    }

    /// Nodes plus the sampled velocity and its exact negation; the mirror map
    /// pairs node m with node quad.mirror(m) and the two sampled columns with
    /// each other.
    pub fn two_sided(v_samples: &[f64], quad: &GaussLegendre) -> Self {
        let nn = quad.len();
        let k = nn + 2;
        let mut v_cols = Vec::with_capacity(v_samples.len() * k);
        let mut mirror = Vec::with_capacity(v_samples.len() * k);
        for (i, &v) in v_samples.iter().enumerate() {
            v_cols.extend_from_slice(quad.nodes());
            v_cols.push(v);
            v_cols.push(-v);
            let s = i * k;
            for m in 0..nn {
                mirror.push(s + quad.mirror(m));
            }
            mirror.push(s + nn + 1);
            mirror.push(s + nn);
        }
        let mut weights = quad.weights().to_vec();
        weights.push(0.0);
        weights.push(0.0);
        VelocityBlocks {
            k,
            v_samples: v_samples.to_vec(),
            v_cols,
            weights,
            mirror: Some(mirror),
        }
    }

    pub fn points(&self) -> usize {
        self.v_samples.len()
    }
}

// ---- trunk inputs ---------------------------------------------------------------

struct TrunkInputs {
    vals: Array2<f64>,
    seeds: [Option<Array2<f64>>; MAX_TAN],
}

impl TrunkInputs {
    fn plain(vals: Array2<f64>) -> Self {
        TrunkInputs {
            vals,
            seeds: [None, None, None],
        }
    }

    /// Seeds channels 0 and 1 as d/dt and d/dx.
    fn seeded_tx(vals: Array2<f64>) -> Self {
        let shape = vals.dim();
        let seed = |row: usize| {
            let mut s = Array2::zeros(shape);
            s.row_mut(row).fill(1.0);
            Some(s)
        };
        let seeds = [seed(0), seed(1), None];
        TrunkInputs { vals, seeds }
    }
}

fn block_inputs(points: &[(f64, f64, f64)], blocks: &VelocityBlocks, seeded: bool) -> TrunkInputs {
    let k = blocks.k;
    let mut vals = Array2::zeros((3, points.len() * k));
    for (i, &(t, x, _)) in points.iter().enumerate() {
        for c in 0..k {
            vals[[0, i * k + c]] = t;
            vals[[1, i * k + c]] = x;
            vals[[2, i * k + c]] = blocks.v_cols[i * k + c];
        }
    }
    if seeded {
        TrunkInputs::seeded_tx(vals)
    } else {
        TrunkInputs::plain(vals)
    }
}

fn tx_inputs(points: &[(f64, f64)], seeded: bool) -> TrunkInputs {
    let mut vals = Array2::zeros((2, points.len()));
    for (i, &(t, x)) in points.iter().enumerate() {
        vals[[0, i]] = t;
        vals[[1, i]] = x;
    }
    if seeded {
        TrunkInputs::seeded_tx(vals)
    } else {
        TrunkInputs::plain(vals)
    }
}

fn coord_cols(points: &[(f64, f64, f64)]) -> Array2<f64> {
    let mut vals = Array2::zeros((3, points.len()));
    for (i, &(t, x, v)) in points.iter().enumerate() {
        vals[[0, i]] = t;
        vals[[1, i]] = x;
        vals[[2, i]] = v;
    }
    vals
}

// ---- residual assembly on field nodes --------------------------------------------

/// Constant (b, n) node repeating `row` in every row; `None` when all zero.
fn row_constant(tape: &mut Tape, row: &[f64], b: usize) -> Option<NodeRef> {
    if row.iter().all(|&q| q == 0.0) {
        return None;
    }
    let m = Array2::from_shape_fn((b, row.len()), |(_, j)| row[j]);
    Some(tape.constant(m))
}

/// eps^2 df/dt + eps v df/dx - (<f> - f) on a one-sided block field carrying
/// d/dt and d/dx tangents. Returns a (b, n) residual.
pub fn transport_residual(tape: &mut Tape, f: NodeRef, blocks: &VelocityBlocks, eps: f64) -> NodeRef {
    let k = blocks.k;
    let sampled = k - 1;
    let ft = tape.extract_tangent(f, 0);
    let fx = tape.extract_tangent(f, 1);
    let ft_s = tape.select_in_block(ft, k, sampled);
    let vfx = tape.col_mul(fx, blocks.v_cols.clone());
    let vfx_s = tape.select_in_block(vfx, k, sampled);
    let fv = tape.value_only(f);
    let mean = tape.block_moment(fv, k, blocks.weights.clone());
    let f_s = tape.select_in_block(fv, k, sampled);
    let relax = tape.sub(mean, f_s);
    let t1 = tape.scale(ft_s, eps * eps);
    let t2 = tape.scale(vfx_s, eps);
    let adv = tape.add(t1, t2);
    tape.sub(adv, relax)
}

/// Micro-macro residual pair on density and fluctuation fields:
/// macro = d(rho)/dt + <v dg/dx> - Q,
/// micro = eps^2 dg/dt + eps (I - P)(v dg/dx) + v d(rho)/dx - (<g> - g).
/// A velocity-independent source has no fluctuating part, so the micro
/// equation carries no source term. `rho` is (b, n); `g` is a one-sided
/// block field; both carry d/dt and d/dx tangents.
pub fn micro_macro_residuals(
    tape: &mut Tape,
    rho: NodeRef,
    g: NodeRef,
    blocks: &VelocityBlocks,
    eps: f64,
    q: &[f64],
) -> (NodeRef, NodeRef) {
    let k = blocks.k;
    let sampled = k - 1;
    let b = tape.value(rho).nrows();
    let rho_t = tape.extract_tangent(rho, 0);
    let rho_x = tape.extract_tangent(rho, 1);
    let g_t = tape.extract_tangent(g, 0);
    let g_x = tape.extract_tangent(g, 1);
    let gt_s = tape.select_in_block(g_t, k, sampled);
    let vgx = tape.col_mul(g_x, blocks.v_cols.clone());
    let flux = tape.block_moment(vgx, k, blocks.weights.clone());
    let vgx_s = tape.select_in_block(vgx, k, sampled);
    let off = tape.sub(vgx_s, flux);
    let v_rho_x = tape.col_mul(rho_x, blocks.v_samples.clone());
    let gv = tape.value_only(g);
    let g_mean = tape.block_moment(gv, k, blocks.weights.clone());
    let g_s = tape.select_in_block(gv, k, sampled);
    let relax = tape.sub(g_mean, g_s);
    let mut balance = tape.add(rho_t, flux);
    if let Some(qn) = row_constant(tape, q, b) {
        balance = tape.sub(balance, qn);
    }
    let t1 = tape.scale(gt_s, eps * eps);
    let t2 = tape.scale(off, eps);
    let s = tape.add(t1, t2);
    let s = tape.add(s, v_rho_x);
    let micro = tape.sub(s, relax);
    (balance, micro)
}

/// The four residuals of the even-odd split, each (b, n).
#[derive(Debug, Clone, Copy)]
pub struct EvenOddResiduals {
    /// eps^2 dr/dt + eps^2 v dj/dx - (rho - r) - eps^2 Q
    pub even: NodeRef,
    /// eps^2 dj/dt + v dr/dx + j
    pub odd: NodeRef,
    /// d(rho)/dt + <v dj/dx> - Q
    pub balance: NodeRef,
    /// rho - <r>
    pub constraint: NodeRef,
}

/// Assembles the even-odd residuals on two-sided block fields r, j and a
/// (b, n) density field; r, j, rho carry d/dt and d/dx tangents.
pub fn even_odd_residuals(
    tape: &mut Tape,
    rho: NodeRef,
    r: NodeRef,
    j: NodeRef,
    blocks: &VelocityBlocks,
    eps: f64,
    q: &[f64],
) -> EvenOddResiduals {
    let k = blocks.k;
    let sampled = k - 2;
    let e2 = eps * eps;
    let b = tape.value(rho).nrows();
    let rho_t = tape.extract_tangent(rho, 0);
    let rho_v = tape.value_only(rho);
    let r_t = tape.extract_tangent(r, 0);
    let r_x = tape.extract_tangent(r, 1);
    let j_t = tape.extract_tangent(j, 0);
    let j_x = tape.extract_tangent(j, 1);
    let rv = tape.value_only(r);
    let jv = tape.value_only(j);

    let rt_s = tape.select_in_block(r_t, k, sampled);
    let vjx = tape.col_mul(j_x, blocks.v_cols.clone());
    let flux = tape.block_moment(vjx, k, blocks.weights.clone());
    let vjx_s = tape.select_in_block(vjx, k, sampled);
    let r_s = tape.select_in_block(rv, k, sampled);
    let j_s = tape.select_in_block(jv, k, sampled);
    let r_mean = tape.block_moment(rv, k, blocks.weights.clone());
    let qn = row_constant(tape, q, b);

    let t1 = tape.scale(rt_s, e2);
    let t2 = tape.scale(vjx_s, e2);
    let adv = tape.add(t1, t2);
    let gap = tape.sub(rho_v, r_s);
    let mut even = tape.sub(adv, gap);
    if let Some(qn) = qn {
        let qe = tape.scale(qn, e2);
        even = tape.sub(even, qe);
    }

    let jt_s = tape.select_in_block(j_t, k, sampled);
    let rx_s = tape.select_in_block(r_x, k, sampled);
    let t1 = tape.scale(jt_s, e2);
    let vrx = tape.col_mul(rx_s, blocks.v_samples.clone());
    let s = tape.add(t1, vrx);
    let odd = tape.add(s, j_s);

    let mut balance = tape.add(rho_t, flux);
    if let Some(qn) = qn {
        balance = tape.sub(balance, qn);
    }

    let constraint = tape.sub(rho_v, r_mean);

    EvenOddResiduals {
        even,
        odd,
        balance,
        constraint,
    }
}

// ---- field construction from the networks ------------------------------------------

fn model_branches(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    samples: &SampleBatch,
) -> Vec<NodeRef> {
    let a = tape.constant(samples.inputs.clone());
    model
        .nets
        .iter()
        .map(|n| branch_tape(tape, &n.config, pv, &n.segments, a))
        .collect()
}

/// Raw net output minus its own velocity average, repeated over the block.
fn centered_fluctuation(
    tape: &mut Tape,
    raw: NodeRef,
    blocks: &VelocityBlocks,
) -> NodeRef {
    let mean = tape.block_moment(raw, blocks.k, blocks.weights.clone());
    let rep = tape.repeat_block(mean, blocks.k);
    tape.sub(raw, rep)
}

/// Interior residual matrices, one named entry per equation of the family.
fn interior_residual_nodes(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    branches: &[NodeRef],
    eps: f64,
    q: &[f64],
    points: &[(f64, f64, f64)],
) -> Vec<(&'static str, NodeRef)> {
    let vs: Vec<f64> = points.iter().map(|p| p.2).collect();
    let tx: Vec<(f64, f64)> = points.iter().map(|p| (p.0, p.1)).collect();
    match model.kind.family() {
        ModelFamily::Full => {
            let blocks = VelocityBlocks::one_sided(&vs, &model.quad);
            let tin = block_inputs(points, &blocks, true);
            let y = tape.input(tin.vals, tin.seeds);
            let raw = model.apply_net(tape, pv, 0, branches[0], y);
            let f = tape.unary(raw, Unary::Softplus);
            vec![("interior", transport_residual(tape, f, &blocks, eps))]
        }
        ModelFamily::MicroMacro => {
            let blocks = VelocityBlocks::one_sided(&vs, &model.quad);
            let rin = tx_inputs(&tx, true);
            let ry = tape.input(rin.vals, rin.seeds);
            let rho = model.apply_net(tape, pv, 0, branches[0], ry);
            let gin = block_inputs(points, &blocks, true);
            let gy = tape.input(gin.vals, gin.seeds);
            let graw = model.apply_net(tape, pv, 1, branches[1], gy);
            let g = centered_fluctuation(tape, graw, &blocks);
            let (balance, micro) = micro_macro_residuals(tape, rho, g, &blocks, eps, q);
            vec![("macro", balance), ("micro", micro)]
        }
        ModelFamily::EvenOdd => {
            let blocks = VelocityBlocks::two_sided(&vs, &model.quad);
            let mirror = blocks.mirror.clone().expect("two-sided blocks have a mirror");
            let rin = tx_inputs(&tx, true);
            let ry = tape.input(rin.vals, rin.seeds);
            let rho = model.apply_net(tape, pv, 0, branches[0], ry);
            let tin = block_inputs(points, &blocks, true);
            let y = tape.input(tin.vals, tin.seeds);
            let r_raw = model.apply_net(tape, pv, 1, branches[1], y);
            let j_raw = model.apply_net(tape, pv, 2, branches[2], y);
            let r = tape.mirror_combine(r_raw, mirror.clone(), 0.5, 1.0);
            let j = tape.mirror_combine(j_raw, mirror, 1.0, -1.0);
            let res = even_odd_residuals(tape, rho, r, j, &blocks, eps, q);
            vec![
                ("even", res.even),
                ("odd", res.odd),
                ("macro", res.balance),
                ("constraint", res.constraint),
            ]
        }
    }
}

/// Reconstructed distribution values f(t, x, v) at arbitrary coordinates,
/// value-only (no input tangents).
fn reconstruct_f(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    branches: &[NodeRef],
    coords: &[(f64, f64, f64)],
    eps: f64,
) -> NodeRef {
    match model.kind.family() {
        ModelFamily::Full => {
            let y = tape.constant(coord_cols(coords));
            let raw = model.apply_net(tape, pv, 0, branches[0], y);
            tape.unary(raw, Unary::Softplus)
        }
        ModelFamily::MicroMacro => {
            let tx: Vec<(f64, f64)> = coords.iter().map(|c| (c.0, c.1)).collect();
            let rin = tx_inputs(&tx, false);
            let ry = tape.constant(rin.vals);
            let rho = model.apply_net(tape, pv, 0, branches[0], ry);
            let vs: Vec<f64> = coords.iter().map(|c| c.2).collect();
            let blocks = VelocityBlocks::one_sided(&vs, &model.quad);
            let gin = block_inputs(coords, &blocks, false);
            let gy = tape.constant(gin.vals);
            let graw = model.apply_net(tape, pv, 1, branches[1], gy);
            let g = centered_fluctuation(tape, graw, &blocks);
            let g_s = tape.select_in_block(g, blocks.k, blocks.k - 1);
            let ge = tape.scale(g_s, eps);
            tape.add(rho, ge)
        }
        ModelFamily::EvenOdd => {
            // minimal two-column blocks (v, -v); no quadrature columns since
            // no moments are needed here
            let n = coords.len();
            let mut vals = Array2::zeros((3, 2 * n));
            let mut mirror = Vec::with_capacity(2 * n);
            for (i, &(t, x, v)) in coords.iter().enumerate() {
                for (c, vv) in [(0, v), (1, -v)] {
                    vals[[0, 2 * i + c]] = t;
                    vals[[1, 2 * i + c]] = x;
                    vals[[2, 2 * i + c]] = vv;
                }
                mirror.push(2 * i + 1);
                mirror.push(2 * i);
            }
            let y = tape.constant(vals);
            let r_raw = model.apply_net(tape, pv, 1, branches[1], y);
            let j_raw = model.apply_net(tape, pv, 2, branches[2], y);
            let r = tape.mirror_combine(r_raw, mirror.clone(), 0.5, 1.0);
            let j = tape.mirror_combine(j_raw, mirror, 1.0, -1.0);
            let r_s = tape.select_in_block(r, 2, 0);
            let j_s = tape.select_in_block(j, 2, 0);
            let je = tape.scale(j_s, eps);
            tape.add(r_s, je)
        }
    }
}

fn boundary_residual_node(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    branches: &[NodeRef],
    problem: &ProblemSpec,
    pts: &[BoundaryPoint],
) -> NodeRef {
    let coords: Vec<(f64, f64, f64)> = pts
        .iter()
        .map(|p| (p.t, problem.wall_x(p.side), p.v))
        .collect();
    let f = reconstruct_f(tape, model, pv, branches, &coords, problem.eps);
    let presc: Vec<f64> = pts.iter().map(|p| problem.prescribed(p.side)).collect();
    let b = tape.value(f).nrows();
    match row_constant(tape, &presc, b) {
        Some(target) => tape.sub(f, target),
        None => f,
    }
}

fn dedup_bits(vals: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut uniq = Vec::new();
    let mut idx = Vec::new();
    for v in vals {
        let e = *seen.entry(v.to_bits()).or_insert_with(|| {
            uniq.push(v);
            uniq.len() - 1
        });
        idx.push(e);
    }
    (uniq, idx)
}

/// f(0, x_j, v_j) for the micro-macro family. The fluctuation average only
/// depends on (t, x), so node blocks are evaluated once per distinct x and
/// gathered, instead of once per grid point.
fn micro_macro_initial_f(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    branches: &[NodeRef],
    eps: f64,
    pts: &[(f64, f64)],
) -> NodeRef {
    let (ux, uidx) = dedup_bits(pts.iter().map(|p| p.0));
    let nn = model.quad.len();
    let rho_pts: Vec<(f64, f64)> = ux.iter().map(|&x| (0.0, x)).collect();
    let rin = tx_inputs(&rho_pts, false);
    let ry = tape.constant(rin.vals);
    let rho_u = model.apply_net(tape, pv, 0, branches[0], ry);
    let rho0 = tape.gather_cols(rho_u, uidx.clone());

    let mut node_vals = Array2::zeros((3, ux.len() * nn));
    for (i, &x) in ux.iter().enumerate() {
        for (c, &vn) in model.quad.nodes().iter().enumerate() {
            node_vals[[1, i * nn + c]] = x;
            node_vals[[2, i * nn + c]] = vn;
        }
    }
    let ny = tape.constant(node_vals);
    let g_nodes = model.apply_net(tape, pv, 1, branches[1], ny);
    let means_u = tape.block_moment(g_nodes, nn, model.quad.weights().to_vec());
    let means = tape.gather_cols(means_u, uidx);

    let mut pt_vals = Array2::zeros((3, pts.len()));
    for (i, &(x, v)) in pts.iter().enumerate() {
        pt_vals[[1, i]] = x;
        pt_vals[[2, i]] = v;
    }
    let py = tape.constant(pt_vals);
    let g_pts = model.apply_net(tape, pv, 1, branches[1], py);
    let g0 = tape.sub(g_pts, means);
    let ge = tape.scale(g0, eps);
    tape.add(rho0, ge)
}

fn initial_residual_node(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    branches: &[NodeRef],
    problem: &ProblemSpec,
    samples: &SampleBatch,
    pts: &[(f64, f64)],
) -> Result<NodeRef> {
    let flat = locate_grid_points(problem.x_range, pts)?;
    let f0 = match model.kind.family() {
        ModelFamily::MicroMacro => {
            micro_macro_initial_f(tape, model, pv, branches, problem.eps, pts)
        }
        _ => {
            let coords: Vec<(f64, f64, f64)> =
                pts.iter().map(|&(x, v)| (0.0, x, v)).collect();
            reconstruct_f(tape, model, pv, branches, &coords, problem.eps)
        }
    };
    let target = samples.targets.select(Axis(1), &flat);
    let tn = tape.constant(target);
    Ok(tape.sub(f0, tn))
}

// ---- empirical risk --------------------------------------------------------------

/// Tape nodes of the assembled risk: the scalar total and each named term.
pub struct RiskTerms {
    pub total: NodeRef,
    pub named: Vec<(&'static str, NodeRef)>,
}

/// Evaluated risk: the scalar total and each named term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

fn mean_square(tape: &mut Tape, x: NodeRef) -> NodeRef {
    let s = tape.unary(x, Unary::Square);
    tape.mean_all(s)
}

/// Assembles the empirical risk on `tape`: for every non-empty collocation
/// group, the mean squared residual over samples and points, all terms
/// summed with weight one.
pub fn build_empirical_risk(
    tape: &mut Tape,
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    samples: &SampleBatch,
    colloc: &CollocationBatch,
) -> Result<RiskTerms> {
    problem.validate()?;
    model.check_params(pv)?;
    colloc.validate(problem)?;
    let branches = model_branches(tape, model, pv, samples);
    let mut named = Vec::new();
    if !colloc.interior.is_empty() {
        let q: Vec<f64> = colloc
            .interior
            .iter()
            .map(|&(t, x, _)| problem.source_at(t, x))
            .collect();
        for (name, res) in
            interior_residual_nodes(tape, model, pv, &branches, problem.eps, &q, &colloc.interior)
        {
            named.push((name, mean_square(tape, res)));
        }
    }
    if !colloc.boundary.is_empty() {
        let res = boundary_residual_node(tape, model, pv, &branches, problem, &colloc.boundary);
        named.push(("boundary", mean_square(tape, res)));
    }
    if !colloc.initial.is_empty() {
        let res = initial_residual_node(
            tape, model, pv, &branches, problem, samples, &colloc.initial,
        )?;
        named.push(("initial", mean_square(tape, res)));
    }
    let nodes: Vec<NodeRef> = named.iter().map(|&(_, n)| n).collect();
    let total = tape.sum_scalars(&nodes);
    Ok(RiskTerms { total, named })
}

fn report(tape: &Tape, terms: &RiskTerms) -> RiskReport {
    RiskReport {
        total: tape.scalar(terms.total),
        terms: terms
            .named
            .iter()
            .map(|&(name, n)| (name, tape.scalar(n)))
            .collect(),
    }
}

fn segment_of(layout: &ParameterLayout, flat: usize) -> &str {
    layout
        .segments()
        .iter()
        .find(|s| flat < s.offset + s.len())
        .map(|s| s.name.as_str())
        .unwrap_or("?")
}

/// Evaluates the empirical risk.
pub fn empirical_risk(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    samples: &SampleBatch,
    colloc: &CollocationBatch,
) -> Result<RiskReport> {
    let mut tape = Tape::new(pv);
    let terms = build_empirical_risk(&mut tape, model, pv, problem, samples, colloc)?;
    Ok(report(&tape, &terms))
}

/// Evaluates the empirical risk and its parameter gradient, rejecting
/// non-finite values with the offending parameter segment named.
pub fn empirical_risk_gradient(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    samples: &SampleBatch,
    colloc: &CollocationBatch,
) -> Result<(RiskReport, Vec<f64>)> {
    let mut tape = Tape::new(pv);
    let terms = build_empirical_risk(&mut tape, model, pv, problem, samples, colloc)?;
    let rep = report(&tape, &terms);
    if !rep.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "empirical risk is {} for {}",
            rep.total, model.kind
        )));
    }
    let grad = tape.backward(terms.total);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "risk gradient entry {i} (segment {}) is not finite",
            segment_of(&pv.layout, i)
        )));
    }
    Ok((rep, grad))
}

// ---- single-point operations -------------------------------------------------------

fn ensure_family(model: &OperatorModel, family: ModelFamily) -> Result<()> {
    if model.kind.family() != family {
        return Err(Error::Config(format!(
            "operation needs a {family:?} model, got {}",
            model.kind
        )));
    }
    Ok(())
}

fn single_batch(a: &Array2<f64>) -> Result<SampleBatch> {
    SampleBatch::from_images(std::slice::from_ref(a))
}

/// Positive distribution value softplus(G(a)(t, x, v)) of a full-family model.
pub fn eval_f_pidon(
    model: &OperatorModel,
    pv: &ParameterVector,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<f64> {
    ensure_family(model, ModelFamily::Full)?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    // eps never enters the full parameterization
    let f = reconstruct_f(&mut tape, model, pv, &branches, &[(t, x, v)], 0.0);
    Ok(tape.value(f)[[0, 0]])
}

/// Density and centered fluctuation at every quadrature node for a
/// micro-macro model; the returned g satisfies <g> = 0 at rule precision.
pub fn eval_rho_g_v1(
    model: &OperatorModel,
    pv: &ParameterVector,
    a: &Array2<f64>,
    t: f64,
    x: f64,
) -> Result<(f64, Vec<f64>)> {
    ensure_family(model, ModelFamily::MicroMacro)?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let ry = tape.constant(tx_inputs(&[(t, x)], false).vals);
    let rho = model.apply_net(&mut tape, pv, 0, branches[0], ry);
    let nn = model.quad.len();
    let mut vals = Array2::zeros((3, nn));
    for (c, &vn) in model.quad.nodes().iter().enumerate() {
        vals[[0, c]] = t;
        vals[[1, c]] = x;
        vals[[2, c]] = vn;
    }
    let gy = tape.constant(vals);
    let raw = model.apply_net(&mut tape, pv, 1, branches[1], gy);
    let mean = tape.block_moment(raw, nn, model.quad.weights().to_vec());
    let rep = tape.repeat_block(mean, nn);
    let g = tape.sub(raw, rep);
    let g_nodes = tape.value(g).row(0).to_vec();
    Ok((tape.value(rho)[[0, 0]], g_nodes))
}

/// Density, even part, and odd part at every quadrature node for an even-odd
/// model; r is even and j odd exactly, by symmetrization over mirrored nodes.
pub fn eval_rho_r_j_v2(
    model: &OperatorModel,
    pv: &ParameterVector,
    a: &Array2<f64>,
    t: f64,
    x: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_family(model, ModelFamily::EvenOdd)?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let ry = tape.constant(tx_inputs(&[(t, x)], false).vals);
    let rho = model.apply_net(&mut tape, pv, 0, branches[0], ry);
    let nn = model.quad.len();
    let mut vals = Array2::zeros((3, nn));
    let mirror: Vec<usize> = (0..nn).map(|c| model.quad.mirror(c)).collect();
    for (c, &vn) in model.quad.nodes().iter().enumerate() {
        vals[[0, c]] = t;
        vals[[1, c]] = x;
        vals[[2, c]] = vn;
    }
    let y = tape.constant(vals);
    let r_raw = model.apply_net(&mut tape, pv, 1, branches[1], y);
    let j_raw = model.apply_net(&mut tape, pv, 2, branches[2], y);
    let r = tape.mirror_combine(r_raw, mirror.clone(), 0.5, 1.0);
    let j = tape.mirror_combine(j_raw, mirror, 1.0, -1.0);
    Ok((
        tape.value(rho)[[0, 0]],
        tape.value(r).row(0).to_vec(),
        tape.value(j).row(0).to_vec(),
    ))
}

/// Reconstructed distribution value at one point for any family, with the
/// problem's eps weighting the velocity-dependent parts.
pub fn eval_f(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<f64> {
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let f = reconstruct_f(&mut tape, model, pv, &branches, &[(t, x, v)], problem.eps);
    Ok(tape.value(f)[[0, 0]])
}

/// Interior transport residual of a full-family model at one point.
pub fn residual_pidon(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<f64> {
    ensure_family(model, ModelFamily::Full)?;
    let terms = interior_terms_at(model, pv, problem, a, t, x, v)?;
    Ok(terms[0].1)
}

/// Macro and micro residuals of a micro-macro model at one point.
pub fn residual_v1(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<(f64, f64)> {
    ensure_family(model, ModelFamily::MicroMacro)?;
    let terms = interior_terms_at(model, pv, problem, a, t, x, v)?;
    Ok((terms[0].1, terms[1].1))
}

/// The four even-odd residuals at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualV2 {
    pub even: f64,
    pub odd: f64,
    pub balance: f64,
    pub constraint: f64,
}

pub fn residual_v2(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<ResidualV2> {
    ensure_family(model, ModelFamily::EvenOdd)?;
    let terms = interior_terms_at(model, pv, problem, a, t, x, v)?;
    Ok(ResidualV2 {
        even: terms[0].1,
        odd: terms[1].1,
        balance: terms[2].1,
        constraint: terms[3].1,
    })
}

fn interior_terms_at(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<Vec<(&'static str, f64)>> {
    problem.validate()?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let q = [problem.source_at(t, x)];
    let nodes = interior_residual_nodes(
        &mut tape,
        model,
        pv,
        &branches,
        problem.eps,
        &q,
        &[(t, x, v)],
    );
    Ok(nodes
        .into_iter()
        .map(|(name, n)| (name, tape.value(n)[[0, 0]]))
        .collect())
}

/// Reconstructed f at a wall minus the prescribed value.
pub fn boundary_residual(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    v: f64,
    side: Side,
) -> Result<f64> {
    problem.validate()?;
    model.check_params(pv)?;
    problem.check_boundary_velocity(side, v)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let pts = [BoundaryPoint { t, v, side }];
    let res = boundary_residual_node(&mut tape, model, pv, &branches, problem, &pts);
    Ok(tape.value(res)[[0, 0]])
}

/// Reconstructed f at t = 0 minus the sample value at the grid point (x, v).
pub fn initial_residual(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    x: f64,
    v: f64,
) -> Result<f64> {
    problem.validate()?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let res = initial_residual_node(
        &mut tape,
        model,
        pv,
        &branches,
        problem,
        &samples,
        &[(x, v)],
    )?;
    Ok(tape.value(res)[[0, 0]])
}

/// Predicted densities on a (t, x) grid, shape (ts.len(), xs.len()). For the
/// full family the density is the quadrature average of f; the other
/// families read their density net directly.
pub fn predict_rho_grid(
    model: &OperatorModel,
    pv: &ParameterVector,
    a: &Array2<f64>,
    ts: &[f64],
    xs: &[f64],
) -> Result<Array2<f64>> {
    if ts.is_empty() || xs.is_empty() {
        return Err(Error::Config("empty prediction grid".into()));
    }
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let n = ts.len() * xs.len();
    let row = match model.kind.family() {
        ModelFamily::Full => {
            let nn = model.quad.len();
            let mut vals = Array2::zeros((3, n * nn));
            for (i, &t) in ts.iter().enumerate() {
                for (j, &x) in xs.iter().enumerate() {
                    let s = (i * xs.len() + j) * nn;
                    for (c, &vn) in model.quad.nodes().iter().enumerate() {
                        vals[[0, s + c]] = t;
                        vals[[1, s + c]] = x;
                        vals[[2, s + c]] = vn;
                    }
                }
            }
            let y = tape.constant(vals);
            let raw = model.apply_net(&mut tape, pv, 0, branches[0], y);
            let f = tape.unary(raw, Unary::Softplus);
            let rho = tape.block_moment(f, nn, model.quad.weights().to_vec());
            tape.value(rho).row(0).to_vec()
        }
        _ => {
            let pts: Vec<(f64, f64)> = ts
                .iter()
                .flat_map(|&t| xs.iter().map(move |&x| (t, x)))
                .collect();
            let y = tape.constant(tx_inputs(&pts, false).vals);
            let rho = model.apply_net(&mut tape, pv, 0, branches[0], y);
            tape.value(rho).row(0).to_vec()
        }
    };
    Array2::from_shape_vec((ts.len(), xs.len()), row)
        .map_err(|e| Error::Shape(format!("density grid: {e}")))
}

/// Predicted density at one point.
pub fn predict_rho(
    model: &OperatorModel,
    pv: &ParameterVector,
    a: &Array2<f64>,
    t: f64,
    x: f64,
) -> Result<f64> {
    Ok(predict_rho_grid(model, pv, a, &[t], &[x])?[[0, 0]])
}

/// Reconstructed f at one point together with its input partials
/// (df/dt, df/dx, df/dv), computed by forward tangents through the same
/// assembly as the residuals.
pub fn eval_f_with_partials(
    model: &OperatorModel,
    pv: &ParameterVector,
    problem: &ProblemSpec,
    a: &Array2<f64>,
    t: f64,
    x: f64,
    v: f64,
) -> Result<(f64, [f64; 3])> {
    problem.validate()?;
    model.check_params(pv)?;
    let samples = single_batch(a)?;
    let mut tape = Tape::new(pv);
    let branches = model_branches(&mut tape, model, pv, &samples);
    let eps = problem.eps;
    let f = match model.kind.family() {
        ModelFamily::Full => {
            let vals = coord_cols(&[(t, x, v)]);
            let seeds = [
                Some(Array2::from_shape_vec((3, 1), vec![1.0, 0.0, 0.0]).expect("seed")),
                Some(Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 0.0]).expect("seed")),
                Some(Array2::from_shape_vec((3, 1), vec![0.0, 0.0, 1.0]).expect("seed")),
            ];
            let y = tape.input(vals, seeds);
            let raw = model.apply_net(&mut tape, pv, 0, branches[0], y);
            tape.unary(raw, Unary::Softplus)
        }
        ModelFamily::MicroMacro => {
            let rin = tx_inputs(&[(t, x)], true);
            let ry = tape.input(rin.vals, rin.seeds);
            let rho = model.apply_net(&mut tape, pv, 0, branches[0], ry);
            let blocks = VelocityBlocks::one_sided(&[v], &model.quad);
            let gin = block_inputs(&[(t, x, v)], &blocks, true);
            let mut seeds = gin.seeds;
            let mut sv = Array2::zeros((3, blocks.k));
            sv[[2, blocks.k - 1]] = 1.0;
            seeds[2] = Some(sv);
            let gy = tape.input(gin.vals, seeds);
            let graw = model.apply_net(&mut tape, pv, 1, branches[1], gy);
            let g = centered_fluctuation(&mut tape, graw, &blocks);
            let g_s = tape.select_in_block(g, blocks.k, blocks.k - 1);
            let ge = tape.scale(g_s, eps);
            tape.add(rho, ge)
        }
        ModelFamily::EvenOdd => {
            let blocks = VelocityBlocks::two_sided(&[v], &model.quad);
            let mirror = blocks.mirror.clone().expect("two-sided blocks have a mirror");
            let tin = block_inputs(&[(t, x, v)], &blocks, true);
            let mut seeds = tin.seeds;
            let mut sv = Array2::zeros((3, blocks.k));
            // the mirrored column moves opposite to v
            sv[[2, blocks.k - 2]] = 1.0;
            sv[[2, blocks.k - 1]] = -1.0;
            seeds[2] = Some(sv);
            let y = tape.input(tin.vals, seeds);
            let r_raw = model.apply_net(&mut tape, pv, 1, branches[1], y);
            let j_raw = model.apply_net(&mut tape, pv, 2, branches[2], y);
            let r = tape.mirror_combine(r_raw, mirror.clone(), 0.5, 1.0);
            let j = tape.mirror_combine(j_raw, mirror, 1.0, -1.0);
            let r_s = tape.select_in_block(r, blocks.k, blocks.k - 2);
            let j_s = tape.select_in_block(j, blocks.k, blocks.k - 2);
            let je = tape.scale(j_s, eps);
            tape.add(r_s, je)
        }
    };
    let val = tape.value(f)[[0, 0]];
    let mut partials = [0.0; 3];
    for (c, p) in partials.iter_mut().enumerate() {
        *p = tape
            .tangent(f, c)
            .map(|m| m[[0, 0]])
            .unwrap_or(0.0);
    }
    Ok((val, partials))
}
