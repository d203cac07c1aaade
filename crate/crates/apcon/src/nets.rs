//! Network architectures: gated (modified) MLPs, the convolutional branch,
//! and the DeepONet combiner.
//!
//! Configs are plain data; parameters live in one flat [`ParameterVector`]
//! whose segments are registered here with dotted names ("f.trunk.z1.w").
//! Forward passes come in two forms: tape builders used by the physics
//! residuals, and single-point wrappers for plain evaluation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ConvSpec, NodeRef, PoolSpec, Tape, Unary};
use crate::error::{Error, Result};
use crate::params::{Init, ParameterLayout, ParameterVector};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Gated MLP: two encoders U,V plus an input lift, then gated updates
/// H <- (1-Z) o U + Z o V, then an affine head.
///
/// `hidden_layers` counts activation layers: the input lift produces the
/// first, each gated block one more.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifiedMlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl ModifiedMlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.output_dim == 0 {
            return Err(Error::Config("mlp dimensions must be positive".into()));
        }
        if self.hidden_layers == 0 {
            return Err(Error::Config("mlp needs at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// Whether pooling runs before or after the filter activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOrder {
    PoolThenActivation,
    ActivationThenPool,
}

/// One convolution + pooling stage of the branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLayerConfig {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pool: (usize, usize),
    pub pool_stride: (usize, usize),
    pub order: PoolOrder,
    pub activation: Activation,
}

/// Convolutional branch: filter layers, channel sum, flatten, affine lift,
/// then a gated MLP to the coefficient vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBranchConfig {
    pub input_shape: (usize, usize),
    pub filter_layers: Vec<FilterLayerConfig>,
    pub lift_width: usize,
    pub mlp: ModifiedMlpConfig,
}

fn stage_out(extent: usize, window: usize, stride: usize, what: &str) -> Result<usize> {
    if window == 0 || stride == 0 || extent < window || (extent - window) % stride != 0 {
        return Err(Error::Shape(format!(
            "{what}: extent {extent} incompatible with window {window} stride {stride}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

impl ConvBranchConfig {
    /// Spatial size after the filter stack (the channel sum preserves it).
    pub fn flatten_len(&self) -> Result<usize> {
        let (mut h, mut w) = self.input_shape;
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty branch input".into()));
        }
        for (i, fl) in self.filter_layers.iter().enumerate() {
            if fl.channels == 0 {
                return Err(Error::Config(format!("filter layer {i} has no channels")));
            }
            h = stage_out(h, fl.kernel.0, fl.stride.0, "conv rows")?;
            w = stage_out(w, fl.kernel.1, fl.stride.1, "conv cols")?;
            h = stage_out(h, fl.pool.0, fl.pool_stride.0, "pool rows")?;
            w = stage_out(w, fl.pool.1, fl.pool_stride.1, "pool cols")?;
        }
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let flat = self.flatten_len()?;
        if self.lift_width == 0 {
            return Err(Error::Config("lift width must be positive".into()));
        }
        if self.mlp.input_dim != self.lift_width {
            return Err(Error::Config(format!(
                "branch mlp expects input {} but the lift produces {}",
                self.mlp.input_dim, self.lift_width
            )));
        }
        let _ = flat;
        self.mlp.validate()
    }
}

/// Function-encoding half of a DeepONet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchConfig {
    Dense(ModifiedMlpConfig),
    Conv(ConvBranchConfig),
}

impl BranchConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            BranchConfig::Dense(m) => m.output_dim,
            BranchConfig::Conv(c) => c.mlp.output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BranchConfig::Dense(m) => m.validate(),
            BranchConfig::Conv(c) => c.validate(),
        }
    }
}

/// One operator network G(a)(y) = sum_j b_j(a) t_j(y) + b0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeepOnetConfig {
    pub branch: BranchConfig,
    pub trunk: ModifiedMlpConfig,
    pub p: usize,
}

impl DeepOnetConfig {
    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.trunk.validate()?;
        if self.branch.output_dim() != self.p || self.trunk.output_dim != self.p {
            return Err(Error::Shape(format!(
                "branch ({}) and trunk ({}) must both produce p = {}",
                self.branch.output_dim(),
                self.trunk.output_dim,
                self.p
            )));
        }
        Ok(())
    }
}

// ---- parameter registration ------------------------------------------------

/// Segment indices of one gated block.
#[derive(Debug, Clone)]
pub struct GatedSegments {
    pub w: usize,
    pub b: usize,
    /// (gain, bias) when layer norm is enabled.
    pub ln: Option<(usize, usize)>,
}

/// Segment indices of a gated MLP.
#[derive(Debug, Clone)]
pub struct MlpSegments {
    pub wu: usize,
    pub bu: usize,
    pub wv: usize,
    pub bv: usize,
    pub wh: usize,
    pub bh: usize,
    pub gated: Vec<GatedSegments>,
    pub wout: usize,
    pub bout: usize,
}

/// Segment indices of a convolutional branch.
#[derive(Debug, Clone)]
pub struct ConvSegments {
    /// (kernel, bias) per filter layer.
    pub filters: Vec<(usize, usize)>,
    pub lift_w: usize,
    pub lift_b: usize,
    pub mlp: MlpSegments,
}

#[derive(Debug, Clone)]
pub enum BranchSegments {
    Dense(MlpSegments),
    Conv(ConvSegments),
}

/// Segment indices of one DeepONet.
#[derive(Debug, Clone)]
pub struct DeepOnetSegments {
    pub branch: BranchSegments,
    pub trunk: MlpSegments,
    pub b0: usize,
}

pub fn register_mlp(
    layout: &mut ParameterLayout,
    prefix: &str,
    cfg: &ModifiedMlpConfig,
) -> MlpSegments {
    let (w, d, o) = (cfg.width, cfg.input_dim, cfg.output_dim);
    let wu = layout.push(&format!("{prefix}.u.w"), w, d, Init::GlorotUniform);
    let bu = layout.push(&format!("{prefix}.u.b"), w, 1, Init::Zeros);
    let wv = layout.push(&format!("{prefix}.v.w"), w, d, Init::GlorotUniform);
    let bv = layout.push(&format!("{prefix}.v.b"), w, 1, Init::Zeros);
    let wh = layout.push(&format!("{prefix}.h.w"), w, d, Init::GlorotUniform);
    let bh = layout.push(&format!("{prefix}.h.b"), w, 1, Init::Zeros);
    let mut gated = Vec::new();
    for l in 1..cfg.hidden_layers {
        let wz = layout.push(&format!("{prefix}.z{l}.w"), w, w, Init::GlorotUniform);
        let bz = layout.push(&format!("{prefix}.z{l}.b"), w, 1, Init::Zeros);
        let ln = cfg.layer_norm.then(|| {
            let g = layout.push(&format!("{prefix}.z{l}.ln_g"), w, 1, Init::Ones);
            let b = layout.push(&format!("{prefix}.z{l}.ln_b"), w, 1, Init::Zeros);
            (g, b)
        });
        gated.push(GatedSegments { w: wz, b: bz, ln });
    }
    let wout = layout.push(&format!("{prefix}.out.w"), o, w, Init::GlorotUniform);
    let bout = layout.push(&format!("{prefix}.out.b"), o, 1, Init::Zeros);
    MlpSegments {
        wu,
        bu,
        wv,
        bv,
        wh,
        bh,
        gated,
        wout,
        bout,
    }
}

pub fn register_conv_branch(
    layout: &mut ParameterLayout,
    prefix: &str,
    cfg: &ConvBranchConfig,
) -> Result<ConvSegments> {
    cfg.validate()?;
    let flat = cfg.flatten_len()?;
    let mut filters = Vec::new();
    let mut in_ch = 1usize;
    for (i, fl) in cfg.filter_layers.iter().enumerate() {
        let cols = in_ch * fl.kernel.0 * fl.kernel.1;
        let w = layout.push(
            &format!("{prefix}.conv{i}.w"),
            fl.channels,
            cols,
            Init::GlorotUniform,
        );
        let b = layout.push(&format!("{prefix}.conv{i}.b"), fl.channels, 1, Init::Zeros);
        filters.push((w, b));
        in_ch = fl.channels;
    }
    let lift_w = layout.push(
        &format!("{prefix}.lift.w"),
        cfg.lift_width,
        flat,
        Init::GlorotUniform,
    );
    let lift_b = layout.push(&format!("{prefix}.lift.b"), cfg.lift_width, 1, Init::Zeros);
    let mlp = register_mlp(layout, &format!("{prefix}.mlp"), &cfg.mlp);
    Ok(ConvSegments {
        filters,
        lift_w,
        lift_b,
        mlp,
    })
}

pub fn register_deeponet(
    layout: &mut ParameterLayout,
    prefix: &str,
    cfg: &DeepOnetConfig,
) -> Result<DeepOnetSegments> {
    cfg.validate()?;
    let branch = match &cfg.branch {
        BranchConfig::Dense(m) => {
            BranchSegments::Dense(register_mlp(layout, &format!("{prefix}.branch"), m))
        }
        BranchConfig::Conv(c) => BranchSegments::Conv(register_conv_branch(
            layout,
            &format!("{prefix}.branch"),
            c,
        )?),
    };
    let trunk = register_mlp(layout, &format!("{prefix}.trunk"), &cfg.trunk);
    let b0 = layout.push(&format!("{prefix}.b0"), 1, 1, Init::Zeros);
    Ok(DeepOnetSegments { branch, trunk, b0 })
}

// ---- tape forward passes ----------------------------------------------------

/// Normalizes each column over the feature (row) dimension, then applies the
/// affine gain and bias. Composed from tape primitives so derivatives of any
/// order come for free.
pub fn layer_norm_tape(
    tape: &mut Tape,
    x: NodeRef,
    gain: NodeRef,
    bias: NodeRef,
    eps: f64,
) -> NodeRef {
    let rows = tape.value(x).nrows();
    let m = tape.mean_rows(x);
    let mb = tape.bcast_rows(m, rows);
    let c = tape.sub(x, mb);
    let c2 = tape.unary(c, Unary::Square);
    let var = tape.mean_rows(c2);
    let ve = tape.add_const(var, eps);
    let sd = tape.unary(ve, Unary::Sqrt);
    let isd = tape.unary(sd, Unary::Recip);
    let isdb = tape.bcast_rows(isd, rows);
    let n = tape.mul(c, isdb);
    let g = tape.mul_bias(n, gain);
    tape.add_bias(g, bias)
}

/// Gated MLP forward pass on (input_dim, N) columns.
pub fn mlp_tape(
    tape: &mut Tape,
    cfg: &ModifiedMlpConfig,
    pv: &ParameterVector,
    segs: &MlpSegments,
    x: NodeRef,
) -> NodeRef {
    assert_eq!(
        tape.value(x).nrows(),
        cfg.input_dim,
        "mlp input rows mismatch"
    );
    let act = cfg.activation.unary();
    let mut encode = |wi: usize, bi: usize| {
        let w = tape.param(pv, wi);
        let b = tape.param(pv, bi);
        let m = tape.matmul(w, x);
        let mb = tape.add_bias(m, b);
        tape.unary(mb, act)
    };
    let u = encode(segs.wu, segs.bu);
    let v = encode(segs.wv, segs.bv);
    let mut h = encode(segs.wh, segs.bh);
    let d = tape.sub(v, u);
    for g in &segs.gated {
        let wz = tape.param(pv, g.w);
        let bz = tape.param(pv, g.b);
        let m = tape.matmul(wz, h);
        let mut pre = tape.add_bias(m, bz);
        if let Some((gi, bi)) = g.ln {
            let gain = tape.param(pv, gi);
            let bias = tape.param(pv, bi);
            pre = layer_norm_tape(tape, pre, gain, bias, LAYER_NORM_EPS);
        }
        let z = tape.unary(pre, act);
        let zd = tape.mul(z, d);
        h = tape.add(u, zd);
    }
    let wout = tape.param(pv, segs.wout);
    let bout = tape.param(pv, segs.bout);
    let m = tape.matmul(wout, h);
    tape.add_bias(m, bout)
}

/// Convolutional branch forward pass on (H*W, N) columns, one image per
/// column in row-major order.
pub fn conv_branch_tape(
    tape: &mut Tape,
    cfg: &ConvBranchConfig,
    pv: &ParameterVector,
    segs: &ConvSegments,
    a: NodeRef,
) -> NodeRef {
    let (mut h, mut w) = cfg.input_shape;
    assert_eq!(tape.value(a).nrows(), h * w, "branch input rows mismatch");
    let mut ch = 1usize;
    let mut cur = a;
    for (fl, &(wi, bi)) in cfg.filter_layers.iter().zip(&segs.filters) {
        let spec = ConvSpec {
            in_ch: ch,
            h,
            w,
            out_ch: fl.channels,
            kh: fl.kernel.0,
            kw: fl.kernel.1,
            sh: fl.stride.0,
            sw: fl.stride.1,
        };
        let kw = tape.param(pv, wi);
        let kb = tape.param(pv, bi);
        cur = tape.conv2d(cur, kw, kb, spec);
        ch = fl.channels;
        h = spec.out_h();
        w = spec.out_w();
        let pspec = PoolSpec {
            ch,
            h,
            w,
            ph: fl.pool.0,
            pw: fl.pool.1,
            sh: fl.pool_stride.0,
            sw: fl.pool_stride.1,
        };
        match fl.order {
            PoolOrder::PoolThenActivation => {
                cur = tape.avg_pool(cur, pspec);
                cur = tape.unary(cur, fl.activation.unary());
            }
            PoolOrder::ActivationThenPool => {
                cur = tape.unary(cur, fl.activation.unary());
                cur = tape.avg_pool(cur, pspec);
            }
        }
        h = pspec.out_h();
        w = pspec.out_w();
    }
    let flat = tape.sum_channels(cur, ch, h * w);
    let lw = tape.param(pv, segs.lift_w);
    let lb = tape.param(pv, segs.lift_b);
    let m = tape.matmul(lw, flat);
    let lifted = tape.add_bias(m, lb);
    let lifted = tape.unary(lifted, Unary::Gelu);
    mlp_tape(tape, &cfg.mlp, pv, &segs.mlp, lifted)
}

/// Branch forward (dense or convolutional) to a (p, N) coefficient matrix.
pub fn branch_tape(
    tape: &mut Tape,
    cfg: &DeepOnetConfig,
    pv: &ParameterVector,
    segs: &DeepOnetSegments,
    a: NodeRef,
) -> NodeRef {
    match (&cfg.branch, &segs.branch) {
        (BranchConfig::Dense(m), BranchSegments::Dense(s)) => mlp_tape(tape, m, pv, s, a),
        (BranchConfig::Conv(c), BranchSegments::Conv(s)) => conv_branch_tape(tape, c, pv, s, a),
        _ => unreachable!("branch config and segments registered together"),
    }
}

/// Trunk forward to a (p, N) basis matrix.
pub fn trunk_tape(
    tape: &mut Tape,
    cfg: &DeepOnetConfig,
    pv: &ParameterVector,
    segs: &DeepOnetSegments,
    y: NodeRef,
) -> NodeRef {
    mlp_tape(tape, &cfg.trunk, pv, &segs.trunk, y)
}

/// Combines branch (p, B) and trunk (p, N) into G values (B, N).
pub fn combine_tape(
    tape: &mut Tape,
    pv: &ParameterVector,
    segs: &DeepOnetSegments,
    branch: NodeRef,
    trunk: NodeRef,
) -> NodeRef {
    let g = tape.tmatmul(branch, trunk);
    let b0 = tape.param(pv, segs.b0);
    tape.add_scalar_node(g, b0)
}

// ---- plain single-point wrappers ---------------------------------------------

fn column(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column vector")
}

/// Single-point gated MLP evaluation.
pub fn modified_mlp_forward(
    cfg: &ModifiedMlpConfig,
    pv: &ParameterVector,
    segs: &MlpSegments,
    x: &[f64],
) -> Result<Vec<f64>> {
    if x.len() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "mlp expects {} inputs, got {}",
            cfg.input_dim,
            x.len()
        )));
    }
    let mut tape = Tape::new(pv);
    let leaf = tape.input(column(x), [None, None, None]);
    let out = mlp_tape(&mut tape, cfg, pv, segs, leaf);
    Ok(tape.value(out).column(0).to_vec())
}

/// Single-image convolutional branch evaluation; `a` is (H, W).
pub fn conv_branch_forward(
    cfg: &ConvBranchConfig,
    pv: &ParameterVector,
    segs: &ConvSegments,
    a: &Array2<f64>,
) -> Result<Vec<f64>> {
    if a.dim() != cfg.input_shape {
        return Err(Error::Shape(format!(
            "branch expects {:?} input, got {:?}",
            cfg.input_shape,
            a.dim()
        )));
    }
    let flat: Vec<f64> = a.iter().copied().collect();
    let mut tape = Tape::new(pv);
    let leaf = tape.input(column(&flat), [None, None, None]);
    let out = conv_branch_tape(&mut tape, cfg, pv, segs, leaf);
    Ok(tape.value(out).column(0).to_vec())
}

/// Inner product of branch and trunk coefficients plus the offset.
pub fn deeponet_combine(b: &[f64], t: &[f64], b0: f64) -> f64 {
    assert_eq!(b.len(), t.len(), "coefficient lengths differ");
    b.iter().zip(t).map(|(x, y)| x * y).sum::<f64>() + b0
}

/// Full operator evaluation at many query points with one branch pass.
///
/// `a` is the (H*W or input_dim)-flattened function sample; `ys` holds one
/// query point per column.
pub fn deeponet_eval_many(
    cfg: &DeepOnetConfig,
    pv: &ParameterVector,
    segs: &DeepOnetSegments,
    a: &[f64],
    ys: &Array2<f64>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ys.nrows() != cfg.trunk.input_dim {
        return Err(Error::Shape(format!(
            "trunk expects {} coordinates, got {}",
            cfg.trunk.input_dim,
            ys.nrows()
        )));
    }
    let expect = match &cfg.branch {
        BranchConfig::Dense(m) => m.input_dim,
        BranchConfig::Conv(c) => c.input_shape.0 * c.input_shape.1,
    };
    if a.len() != expect {
        return Err(Error::Shape(format!(
            "branch expects {expect} inputs, got {}",
            a.len()
        )));
    }
    let mut tape = Tape::new(pv);
    let a_leaf = tape.input(column(a), [None, None, None]);
    let y_leaf = tape.input(ys.clone(), [None, None, None]);
    let b = branch_tape(&mut tape, cfg, pv, segs, a_leaf);
    let t = trunk_tape(&mut tape, cfg, pv, segs, y_leaf);
    let g = combine_tape(&mut tape, pv, segs, b, t);
    Ok(tape.value(g).row(0).to_vec())
}

/// Operator evaluation at a single query point.
pub fn deeponet_eval(
    cfg: &DeepOnetConfig,
    pv: &ParameterVector,
    segs: &DeepOnetSegments,
    a: &[f64],
    y: &[f64],
) -> Result<f64> {
    let ys = column(y);
    Ok(deeponet_eval_many(cfg, pv, segs, a, &ys)?[0])
}

/// Softplus output wrap keeping predicted densities positive.
pub fn positive_wrap(u: f64) -> f64 {
    Unary::Softplus.f(u)
}

/// Plain layer norm over one feature vector.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(v.len(), gain.len(), "gain length");
    assert_eq!(v.len(), bias.len(), "bias length");
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| (x - mean) * inv * g + b)
        .collect()
}

#[cfg(test)]
mod tests;
