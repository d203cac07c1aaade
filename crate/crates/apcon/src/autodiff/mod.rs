//! Differentiation engine: forward-mode input tangents composed with
//! reverse-mode parameter adjoints on one tape.
//!
//! Tape nodes hold matrices whose columns are independent evaluation points.
//! Each node carries its value and up to three tangent channels; channel c
//! of a node is d(value)/d(seed_c) column by column, where the seeds are
//! fixed at the input leaves (typically one-hot rows selecting t, x or v).
//! The reverse pass tracks adjoints of values and of tangent channels, so a
//! scalar loss may read tangents (PDE residuals do) and still receive exact
//! parameter gradients. Nonlinear primitives therefore expose second
//! derivatives; see `activation`.
//!
//! Evaluation order is fixed by node creation order, so results are
//! bitwise reproducible.

pub mod activation;
pub mod fd;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
pub use activation::{Activation, Unary};

/// Maximum number of simultaneous tangent channels (t, x, v).
pub const MAX_TAN: usize = 3;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

/// Value plus optional tangent channels, all of identical shape.
#[derive(Debug, Default)]
pub struct Batch {
    pub val: Array2<f64>,
    pub tan: [Option<Array2<f64>>; MAX_TAN],
}

impl Batch {
    fn plain(val: Array2<f64>) -> Self {
        Batch {
            val,
            tan: Default::default(),
        }
    }

    fn has(&self, c: usize) -> bool {
        self.tan[c].is_some()
    }
}

/// Geometry of a convolution: channel-major row layout, no padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.sw + 1
    }
    fn check(&self) {
        assert!(
            self.h >= self.kh && (self.h - self.kh) % self.sh == 0,
            "conv height {} not reachable by kernel {} stride {}",
            self.h,
            self.kh,
            self.sh
        );
        assert!(
            self.w >= self.kw && (self.w - self.kw) % self.sw == 0,
            "conv width {} not reachable by kernel {} stride {}",
            self.w,
            self.kw,
            self.sw
        );
    }
}

/// Geometry of an average-pooling window.
#[derive(Debug, Clone, Copy)]
pub struct PoolSpec {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl PoolSpec {
    pub fn out_h(&self) -> usize {
        (self.h - self.ph) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.pw) / self.sw + 1
    }
    fn check(&self) {
        assert!(
            self.h >= self.ph && (self.h - self.ph) % self.sh == 0,
            "pool height {} not reachable by window {} stride {}",
            self.h,
            self.ph,
            self.sh
        );
        assert!(
            self.w >= self.pw && (self.w - self.pw) % self.sw == 0,
            "pool width {} not reachable by window {} stride {}",
            self.w,
            self.pw,
            self.sw
        );
    }
}

#[derive(Debug)]
enum Op {
    /// Seeded leaf; adjoints are discarded (inputs are data, not unknowns).
    Input,
    /// Constant leaf with no derivatives of any kind.
    ConstMat,
    /// Leaf viewing a parameter segment as a rows x cols matrix.
    Param { offset: usize },
    /// W @ X.
    MatMul { w: NodeRef, x: NodeRef },
    /// A^T @ B (branch-trunk combiner).
    TransMatMul { a: NodeRef, b: NodeRef },
    /// X + b broadcast across columns; b is (rows, 1).
    AddBias { x: NodeRef, b: NodeRef },
    /// X * g broadcast across columns; g is (rows, 1).
    MulBias { x: NodeRef, g: NodeRef },
    /// X + s broadcast everywhere; s is (1, 1).
    AddScalarNode { x: NodeRef, s: NodeRef },
    Add { a: NodeRef, b: NodeRef },
    Sub { a: NodeRef, b: NodeRef },
    Mul { a: NodeRef, b: NodeRef },
    Scale { x: NodeRef, c: f64 },
    AddConst { x: NodeRef },
    /// Per-column constant factor.
    ColMulConst { x: NodeRef, w: Vec<f64> },
    Unary { x: NodeRef, f: Unary },
    /// (F,N) -> (1,N) column means over rows.
    MeanRows { x: NodeRef },
    /// (1,N) -> (rows,N) replication.
    BcastRows { x: NodeRef },
    /// (F,N*k) -> (F,N): out[:,j] = sum_i w[i] x[:, j*k+i].
    BlockMoment { x: NodeRef, k: usize, w: Vec<f64> },
    /// (F,N) -> (F,N*k): out[:, j*k+i] = x[:, j].
    RepeatBlock { x: NodeRef, k: usize },
    /// (F,N*k) -> (F,N): out[:,j] = x[:, j*k+idx].
    SelectInBlock { x: NodeRef, k: usize, idx: usize },
    /// out[:,j] = x[:, idx[j]].
    GatherCols { x: NodeRef, idx: Vec<usize> },
    /// out[:,c] = scale * (x[:,c] + sign * x[:,mirror[c]]).
    MirrorCombine {
        x: NodeRef,
        mirror: Vec<usize>,
        scale: f64,
        sign: f64,
    },
    /// Value := tangent channel ch of x; result carries no tangents.
    ExtractTangent { x: NodeRef, ch: usize },
    /// Value := value of x, tangents dropped (detach from forward mode).
    ValueOnly { x: NodeRef },
    /// (F,N) -> (1,1) mean over all entries.
    MeanAll { x: NodeRef },
    /// Sum of (1,1) scalars.
    SumScalars { xs: Vec<NodeRef> },
    Conv2d {
        x: NodeRef,
        w: NodeRef,
        b: NodeRef,
        spec: ConvSpec,
    },
    AvgPool { x: NodeRef, spec: PoolSpec },
    /// (ch*hw, N) -> (hw, N) sum across channels.
    SumChannels { x: NodeRef, ch: usize, hw: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: Batch,
}

/// Wengert list over dual-valued matrices, bound to one parameter layout.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_len: usize,
}

/// Adjoint of a Batch during the reverse sweep.
#[derive(Default)]
struct Adj {
    val: Option<Array2<f64>>,
    tan: [Option<Array2<f64>>; MAX_TAN],
}

fn acc(slot: &mut Option<Array2<f64>>, contrib: Array2<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(m) => *m += &contrib,
    }
}

/// dst += a * b elementwise, allocating only if dst is empty.
fn acc_prod(slot: &mut Option<Array2<f64>>, a: &Array2<f64>, b: &Array2<f64>) {
    match slot {
        None => *slot = Some(a * b),
        Some(m) => Zip::from(m).and(a).and(b).for_each(|m, &a, &b| *m += a * b),
    }
}

fn acc_scaled(slot: &mut Option<Array2<f64>>, a: &Array2<f64>, c: f64) {
    match slot {
        None => *slot = Some(a * c),
        Some(m) => Zip::from(m).and(a).for_each(|m, &a| *m += c * a),
    }
}

impl Tape {
    /// A tape whose parameter gradients have the same length as `params`.
    pub fn new(params: &ParameterVector) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_len: params.len(),
        }
    }

    /// A tape for param-free expressions (mocks, oracles).
    pub fn without_params() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_len: 0,
        }
    }

    fn push(&mut self, op: Op, out: Batch) -> NodeRef {
        self.nodes.push(Node { op, out });
        NodeRef(self.nodes.len() - 1)
    }

    fn out(&self, h: NodeRef) -> &Batch {
        &self.nodes[h.0].out
    }

    pub fn value(&self, h: NodeRef) -> &Array2<f64> {
        &self.nodes[h.0].out.val
    }

    pub fn tangent(&self, h: NodeRef, c: usize) -> Option<&Array2<f64>> {
        self.nodes[h.0].out.tan[c].as_ref()
    }

    pub fn scalar(&self, h: NodeRef) -> f64 {
        let v = self.value(h);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non 1x1 node");
        v[[0, 0]]
    }

    // ---- leaves ---------------------------------------------------------

    /// Seeded input leaf. `seeds[c]`, when present, must match `val`'s shape.
    pub fn input(&mut self, val: Array2<f64>, seeds: [Option<Array2<f64>>; MAX_TAN]) -> NodeRef {
        for s in seeds.iter().flatten() {
            assert_eq!(s.dim(), val.dim(), "seed shape differs from value shape");
        }
        self.push(Op::Input, Batch { val, tan: seeds })
    }

    pub fn constant(&mut self, val: Array2<f64>) -> NodeRef {
        self.push(Op::ConstMat, Batch::plain(val))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeRef {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Parameter segment leaf viewed as its (rows, cols) matrix.
    pub fn param(&mut self, params: &ParameterVector, seg_idx: usize) -> NodeRef {
        let seg = params.layout.segment(seg_idx);
        assert_eq!(
            self.grad_len,
            params.len(),
            "tape bound to a different parameter vector length"
        );
        let val = Array2::from_shape_vec(
            (seg.rows, seg.cols),
            params.values[seg.offset..seg.offset + seg.len()].to_vec(),
        )
        .expect("segment length matches rows*cols");
        self.push(Op::Param { offset: seg.offset }, Batch::plain(val))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, w: NodeRef, x: NodeRef) -> NodeRef {
        let (wb, xb) = (self.out(w), self.out(x));
        assert_eq!(wb.val.ncols(), xb.val.nrows(), "matmul inner dims");
        let mut out = Batch::plain(wb.val.dot(&xb.val));
        for c in 0..MAX_TAN {
            let mut t: Option<Array2<f64>> = None;
            if let Some(wt) = &wb.tan[c] {
                acc(&mut t, wt.dot(&xb.val));
            }
            if let Some(xt) = &xb.tan[c] {
                acc(&mut t, wb.val.dot(xt));
            }
            out.tan[c] = t;
        }
        self.push(Op::MatMul { w, x }, out)
    }

    /// A^T @ B, combining per-sample branch columns with per-point trunk columns.
    pub fn tmatmul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, bb) = (self.out(a), self.out(b));
        assert_eq!(ab.val.nrows(), bb.val.nrows(), "tmatmul shared dim");
        let mut out = Batch::plain(ab.val.t().dot(&bb.val));
        for c in 0..MAX_TAN {
            let mut t: Option<Array2<f64>> = None;
            if let Some(at) = &ab.tan[c] {
                acc(&mut t, at.t().dot(&bb.val));
            }
            if let Some(bt) = &bb.tan[c] {
                acc(&mut t, ab.val.t().dot(bt));
            }
            out.tan[c] = t;
        }
        self.push(Op::TransMatMul { a, b }, out)
    }

    pub fn add_bias(&mut self, x: NodeRef, b: NodeRef) -> NodeRef {
        let (xb, bb) = (self.out(x), self.out(b));
        assert_eq!(bb.val.dim(), (xb.val.nrows(), 1), "bias shape");
        assert!(bb.tan.iter().all(|t| t.is_none()), "bias with tangents");
        let mut val = xb.val.clone();
        val += &bb.val.broadcast((xb.val.nrows(), xb.val.ncols())).unwrap();
        let mut out = Batch::plain(val);
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].clone();
        }
        self.push(Op::AddBias { x, b }, out)
    }

    pub fn mul_bias(&mut self, x: NodeRef, g: NodeRef) -> NodeRef {
        let (xb, gb) = (self.out(x), self.out(g));
        assert_eq!(gb.val.dim(), (xb.val.nrows(), 1), "gain shape");
        assert!(gb.tan.iter().all(|t| t.is_none()), "gain with tangents");
        let bc = gb.val.broadcast((xb.val.nrows(), xb.val.ncols())).unwrap();
        let mut out = Batch::plain(&xb.val * &bc);
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(|t| t * &bc);
        }
        self.push(Op::MulBias { x, g }, out)
    }

    pub fn add_scalar_node(&mut self, x: NodeRef, s: NodeRef) -> NodeRef {
        let (xb, sb) = (self.out(x), self.out(s));
        assert_eq!(sb.val.dim(), (1, 1), "scalar node shape");
        assert!(sb.tan.iter().all(|t| t.is_none()), "scalar with tangents");
        let mut out = Batch::plain(&xb.val + sb.val[[0, 0]]);
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].clone();
        }
        self.push(Op::AddScalarNode { x, s }, out)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, bb) = (self.out(a), self.out(b));
        assert_eq!(ab.val.dim(), bb.val.dim(), "add shapes");
        let mut out = Batch::plain(&ab.val + &bb.val);
        for c in 0..MAX_TAN {
            out.tan[c] = match (&ab.tan[c], &bb.tan[c]) {
                (Some(x), Some(y)) => Some(x + y),
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(y.clone()),
                (None, None) => None,
            };
        }
        self.push(Op::Add { a, b }, out)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, bb) = (self.out(a), self.out(b));
        assert_eq!(ab.val.dim(), bb.val.dim(), "sub shapes");
        let mut out = Batch::plain(&ab.val - &bb.val);
        for c in 0..MAX_TAN {
            out.tan[c] = match (&ab.tan[c], &bb.tan[c]) {
                (Some(x), Some(y)) => Some(x - y),
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(-y),
                (None, None) => None,
            };
        }
        self.push(Op::Sub { a, b }, out)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (ab, bb) = (self.out(a), self.out(b));
        assert_eq!(ab.val.dim(), bb.val.dim(), "mul shapes");
        let mut out = Batch::plain(&ab.val * &bb.val);
        for c in 0..MAX_TAN {
            let mut t: Option<Array2<f64>> = None;
            if let Some(at) = &ab.tan[c] {
                acc(&mut t, at * &bb.val);
            }
            if let Some(bt) = &bb.tan[c] {
                acc_prod(&mut t, &ab.val, bt);
            }
            out.tan[c] = t;
        }
        self.push(Op::Mul { a, b }, out)
    }

    pub fn scale(&mut self, x: NodeRef, c: f64) -> NodeRef {
        let xb = self.out(x);
        let mut out = Batch::plain(&xb.val * c);
        for ch in 0..MAX_TAN {
            out.tan[ch] = xb.tan[ch].as_ref().map(|t| t * c);
        }
        self.push(Op::Scale { x, c }, out)
    }

    pub fn add_const(&mut self, x: NodeRef, c: f64) -> NodeRef {
        let xb = self.out(x);
        let mut out = Batch::plain(&xb.val + c);
        for ch in 0..MAX_TAN {
            out.tan[ch] = xb.tan[ch].clone();
        }
        self.push(Op::AddConst { x }, out)
    }

    /// Multiplies column n by the constant w[n] (tangents included).
    pub fn col_mul(&mut self, x: NodeRef, w: Vec<f64>) -> NodeRef {
        let xb = self.out(x);
        assert_eq!(w.len(), xb.val.ncols(), "column factor count");
        let apply = |m: &Array2<f64>| {
            let mut o = m.clone();
            for (mut col, &f) in o.columns_mut().into_iter().zip(&w) {
                col *= f;
            }
            o
        };
        let mut out = Batch::plain(apply(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&apply);
        }
        self.push(Op::ColMulConst { x, w }, out)
    }

    pub fn unary(&mut self, x: NodeRef, f: Unary) -> NodeRef {
        let xb = self.out(x);
        let val = xb.val.mapv(|u| f.f(u));
        let mut out = Batch::plain(val);
        let any_tan = xb.tan.iter().any(|t| t.is_some());
        if any_tan {
            let df = xb.val.mapv(|u| f.df(u));
            for c in 0..MAX_TAN {
                out.tan[c] = xb.tan[c].as_ref().map(|t| t * &df);
            }
        }
        self.push(Op::Unary { x, f }, out)
    }

    pub fn activation(&mut self, x: NodeRef, act: Activation) -> NodeRef {
        self.unary(x, act.unary())
    }

    // ---- reductions and rearrangements ----------------------------------

    pub fn mean_rows(&mut self, x: NodeRef) -> NodeRef {
        let xb = self.out(x);
        let f = xb.val.nrows() as f64;
        let mk = |m: &Array2<f64>| {
            let s = m.sum_axis(Axis(0)) / f;
            s.insert_axis(Axis(0))
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::MeanRows { x }, out)
    }

    pub fn bcast_rows(&mut self, x: NodeRef, rows: usize) -> NodeRef {
        let xb = self.out(x);
        assert_eq!(xb.val.nrows(), 1, "bcast_rows takes a row vector");
        let mk = |m: &Array2<f64>| m.broadcast((rows, m.ncols())).unwrap().to_owned();
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::BcastRows { x }, out)
    }

    /// Weighted sum over size-k column blocks (quadrature moments). Terms are
    /// accumulated from the block ends inward so that mirrored node pairs of a
    /// symmetric rule cancel odd integrands exactly, not just to rounding.
    pub fn block_moment(&mut self, x: NodeRef, k: usize, w: Vec<f64>) -> NodeRef {
        let xb = self.out(x);
        assert_eq!(w.len(), k, "block weight count");
        assert_eq!(xb.val.ncols() % k, 0, "columns not divisible by block");
        let n = xb.val.ncols() / k;
        let mk = |m: &Array2<f64>| {
            let mut o = Array2::zeros((m.nrows(), n));
            for j in 0..n {
                let mut dst = o.column_mut(j);
                let mut take = |i: usize| {
                    if w[i] != 0.0 {
                        dst.scaled_add(w[i], &m.column(j * k + i));
                    }
                };
                for i in 0..k / 2 {
                    take(i);
                    take(k - 1 - i);
                }
                if k % 2 == 1 {
                    take(k / 2);
                }
            }
            o
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::BlockMoment { x, k, w }, out)
    }

    pub fn repeat_block(&mut self, x: NodeRef, k: usize) -> NodeRef {
        let xb = self.out(x);
        let n = xb.val.ncols();
        let mk = |m: &Array2<f64>| {
            let mut o = Array2::zeros((m.nrows(), n * k));
            for j in 0..n {
                for i in 0..k {
                    o.column_mut(j * k + i).assign(&m.column(j));
                }
            }
            o
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::RepeatBlock { x, k }, out)
    }

    pub fn select_in_block(&mut self, x: NodeRef, k: usize, idx: usize) -> NodeRef {
        let xb = self.out(x);
        assert!(idx < k, "select index inside block");
        assert_eq!(xb.val.ncols() % k, 0, "columns not divisible by block");
        let n = xb.val.ncols() / k;
        let mk = |m: &Array2<f64>| {
            let mut o = Array2::zeros((m.nrows(), n));
            for j in 0..n {
                o.column_mut(j).assign(&m.column(j * k + idx));
            }
            o
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::SelectInBlock { x, k, idx }, out)
    }

    pub fn gather_cols(&mut self, x: NodeRef, idx: Vec<usize>) -> NodeRef {
        let xb = self.out(x);
        assert!(idx.iter().all(|&i| i < xb.val.ncols()), "gather in range");
        let mk = |m: &Array2<f64>| {
            let mut o = Array2::zeros((m.nrows(), idx.len()));
            for (j, &i) in idx.iter().enumerate() {
                o.column_mut(j).assign(&m.column(i));
            }
            o
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::GatherCols { x, idx }, out)
    }

    /// out[:,c] = scale * (x[:,c] + sign * x[:,mirror[c]]).
    ///
    /// Symmetrizes columns under a velocity reflection; `mirror` must be an
    /// involution on column indices.
    pub fn mirror_combine(
        &mut self,
        x: NodeRef,
        mirror: Vec<usize>,
        scale: f64,
        sign: f64,
    ) -> NodeRef {
        let xb = self.out(x);
        assert_eq!(mirror.len(), xb.val.ncols(), "mirror index count");
        assert!(
            mirror.iter().enumerate().all(|(c, &m)| mirror[m] == c),
            "mirror map must be an involution"
        );
        let mk = |m: &Array2<f64>| {
            let mut o = Array2::zeros((m.nrows(), m.ncols()));
            for (j, &mj) in mirror.iter().enumerate() {
                let (a, b) = (m.column(j), m.column(mj));
                let mut dst = o.column_mut(j);
                Zip::from(&mut dst)
                    .and(&a)
                    .and(&b)
                    .for_each(|d, &a, &b| *d = scale * (a + sign * b));
            }
            o
        };
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(
            Op::MirrorCombine {
                x,
                mirror,
                scale,
                sign,
            },
            out,
        )
    }

    /// Materializes tangent channel `ch` as a value; the PDE residuals read
    /// input derivatives through this op.
    pub fn extract_tangent(&mut self, x: NodeRef, ch: usize) -> NodeRef {
        let xb = self.out(x);
        let t = xb.tan[ch]
            .as_ref()
            .expect("extract_tangent on a channel the node does not carry")
            .clone();
        self.push(Op::ExtractTangent { x, ch }, Batch::plain(t))
    }

    /// Drops tangent channels; keeps the value differentiable by parameters.
    pub fn value_only(&mut self, x: NodeRef) -> NodeRef {
        let xb = self.out(x);
        if xb.tan.iter().all(|t| t.is_none()) {
            return x;
        }
        let v = xb.val.clone();
        self.push(Op::ValueOnly { x }, Batch::plain(v))
    }

    pub fn mean_all(&mut self, x: NodeRef) -> NodeRef {
        let xb = self.out(x);
        let n = (xb.val.nrows() * xb.val.ncols()) as f64;
        let mk = |m: &Array2<f64>| Array2::from_elem((1, 1), m.sum() / n);
        let mut out = Batch::plain(mk(&xb.val));
        for c in 0..MAX_TAN {
            out.tan[c] = xb.tan[c].as_ref().map(&mk);
        }
        self.push(Op::MeanAll { x }, out)
    }

    pub fn sum_scalars(&mut self, xs: &[NodeRef]) -> NodeRef {
        assert!(!xs.is_empty(), "sum of no scalars");
        let mut v = 0.0;
        for &x in xs {
            let b = self.out(x);
            assert_eq!(b.val.dim(), (1, 1), "sum_scalars inputs must be 1x1");
            assert!(
                b.tan.iter().all(|t| t.is_none()),
                "sum_scalars inputs must be value-only"
            );
            v += b.val[[0, 0]];
        }
        self.push(
            Op::SumScalars { xs: xs.to_vec() },
            Batch::plain(Array2::from_elem((1, 1), v)),
        )
    }

    // ---- convolution path (value-only; branch inputs carry no tangents) --

    pub fn conv2d(&mut self, x: NodeRef, w: NodeRef, b: NodeRef, spec: ConvSpec) -> NodeRef {
        spec.check();
        let (xb, wb, bb) = (self.out(x), self.out(w), self.out(b));
        assert!(
            xb.tan.iter().all(|t| t.is_none()),
            "conv input with tangents is unsupported"
        );
        assert_eq!(xb.val.nrows(), spec.in_ch * spec.h * spec.w, "conv input rows");
        assert_eq!(
            wb.val.dim(),
            (spec.out_ch, spec.in_ch * spec.kh * spec.kw),
            "conv kernel shape"
        );
        assert_eq!(bb.val.dim(), (spec.out_ch, 1), "conv bias shape");
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let n = xb.val.ncols();
        let mut out = Array2::zeros((spec.out_ch * oh * ow, n));
        for col in 0..n {
            for oc in 0..spec.out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = bb.val[[oc, 0]];
                        for ci in 0..spec.in_ch {
                            for di in 0..spec.kh {
                                for dj in 0..spec.kw {
                                    let r = ci * spec.h * spec.w
                                        + (i * spec.sh + di) * spec.w
                                        + (j * spec.sw + dj);
                                    s += wb.val[[oc, ci * spec.kh * spec.kw + di * spec.kw + dj]]
                                        * xb.val[[r, col]];
                                }
                            }
                        }
                        out[[oc * oh * ow + i * ow + j, col]] = s;
                    }
                }
            }
        }
        self.push(Op::Conv2d { x, w, b, spec }, Batch::plain(out))
    }

    pub fn avg_pool(&mut self, x: NodeRef, spec: PoolSpec) -> NodeRef {
        spec.check();
        let xb = self.out(x);
        assert!(
            xb.tan.iter().all(|t| t.is_none()),
            "pool input with tangents is unsupported"
        );
        assert_eq!(xb.val.nrows(), spec.ch * spec.h * spec.w, "pool input rows");
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let n = xb.val.ncols();
        let inv = 1.0 / (spec.ph * spec.pw) as f64;
        let mut out = Array2::zeros((spec.ch * oh * ow, n));
        for col in 0..n {
            for c in 0..spec.ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for di in 0..spec.ph {
                            for dj in 0..spec.pw {
                                let r = c * spec.h * spec.w
                                    + (i * spec.sh + di) * spec.w
                                    + (j * spec.sw + dj);
                                s += xb.val[[r, col]];
                            }
                        }
                        out[[c * oh * ow + i * ow + j, col]] = s * inv;
                    }
                }
            }
        }
        self.push(Op::AvgPool { x, spec }, Batch::plain(out))
    }

    pub fn sum_channels(&mut self, x: NodeRef, ch: usize, hw: usize) -> NodeRef {
        let xb = self.out(x);
        assert!(
            xb.tan.iter().all(|t| t.is_none()),
            "channel sum input with tangents is unsupported"
        );
        assert_eq!(xb.val.nrows(), ch * hw, "channel sum input rows");
        let n = xb.val.ncols();
        let mut out = Array2::zeros((hw, n));
        for c in 0..ch {
            out += &xb.val.slice(ndarray::s![c * hw..(c + 1) * hw, ..]);
        }
        self.push(Op::SumChannels { x, ch, hw }, Batch::plain(out))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Accumulates d(loss)/d(params) for a (1,1) loss node.
    ///
    /// The reverse sweep carries adjoints for values and tangent channels;
    /// the tangent adjoints are what make gradients of derivative-containing
    /// losses exact.
    pub fn backward(&self, loss: NodeRef) -> Vec<f64> {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward requires a scalar loss node"
        );
        let mut grad = vec![0.0; self.grad_len];
        let mut adj: Vec<Adj> = (0..self.nodes.len()).map(|_| Adj::default()).collect();
        adj[loss.0].val = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let a = std::mem::take(&mut adj[id]);
            if a.val.is_none() && a.tan.iter().all(|t| t.is_none()) {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::ConstMat => {}
                Op::Param { offset } => {
                    if let Some(av) = &a.val {
                        let flat = &mut grad[*offset..*offset + av.len()];
                        for (g, &v) in flat.iter_mut().zip(av.iter()) {
                            *g += v;
                        }
                    }
                    debug_assert!(
                        a.tan.iter().all(|t| t.is_none()),
                        "parameters cannot receive tangent adjoints"
                    );
                }
                Op::MatMul { w, x } => {
                    let (wb, xb) = (self.out(*w), self.out(*x));
                    // w adjoints
                    {
                        let slot = &mut adj[w.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ov.dot(&xb.val.t()));
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(xt)) = (&a.tan[c], &xb.tan[c]) {
                                acc(&mut slot.val, ot.dot(&xt.t()));
                            }
                            if wb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ot.dot(&xb.val.t()));
                                }
                            }
                        }
                    }
                    // x adjoints
                    {
                        let slot = &mut adj[x.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, wb.val.t().dot(ov));
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(wt)) = (&a.tan[c], &wb.tan[c]) {
                                acc(&mut slot.val, wt.t().dot(ot));
                            }
                            if xb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], wb.val.t().dot(ot));
                                }
                            }
                        }
                    }
                }
                Op::TransMatMul { a: an, b: bn } => {
                    let (ab, bb) = (self.out(*an), self.out(*bn));
                    {
                        let slot = &mut adj[an.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, bb.val.dot(&ov.t()));
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(bt)) = (&a.tan[c], &bb.tan[c]) {
                                acc(&mut slot.val, bt.dot(&ot.t()));
                            }
                            if ab.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], bb.val.dot(&ot.t()));
                                }
                            }
                        }
                    }
                    {
                        let slot = &mut adj[bn.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ab.val.dot(ov));
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(at)) = (&a.tan[c], &ab.tan[c]) {
                                acc(&mut slot.val, at.dot(ot));
                            }
                            if bb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ab.val.dot(ot));
                                }
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let xb = self.out(*x);
                    {
                        let slot = &mut adj[x.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ov.clone());
                        }
                        for c in 0..MAX_TAN {
                            if xb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ot.clone());
                                }
                            }
                        }
                    }
                    if let Some(ov) = &a.val {
                        let col = ov.sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut adj[b.0].val, col);
                    }
                }
                Op::MulBias { x, g } => {
                    let (xb, gb) = (self.out(*x), self.out(*g));
                    let bc = gb
                        .val
                        .broadcast((xb.val.nrows(), xb.val.ncols()))
                        .unwrap()
                        .to_owned();
                    {
                        let slot = &mut adj[x.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ov * &bc);
                        }
                        for c in 0..MAX_TAN {
                            if xb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ot * &bc);
                                }
                            }
                        }
                    }
                    {
                        let mut gsum: Option<Array2<f64>> = None;
                        if let Some(ov) = &a.val {
                            acc(&mut gsum, ov * &xb.val);
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(xt)) = (&a.tan[c], &xb.tan[c]) {
                                acc_prod(&mut gsum, ot, xt);
                            }
                        }
                        if let Some(gs) = gsum {
                            let col = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
                            acc(&mut adj[g.0].val, col);
                        }
                    }
                }
                Op::AddScalarNode { x, s } => {
                    let xb = self.out(*x);
                    {
                        let slot = &mut adj[x.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ov.clone());
                        }
                        for c in 0..MAX_TAN {
                            if xb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ot.clone());
                                }
                            }
                        }
                    }
                    if let Some(ov) = &a.val {
                        acc(
                            &mut adj[s.0].val,
                            Array2::from_elem((1, 1), ov.sum()),
                        );
                    }
                }
                Op::Add { a: an, b: bn } => {
                    for n in [an, bn] {
                        let nb = self.out(*n);
                        let slot = &mut adj[n.0];
                        if let Some(ov) = &a.val {
                            acc(&mut slot.val, ov.clone());
                        }
                        for c in 0..MAX_TAN {
                            if nb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc(&mut slot.tan[c], ot.clone());
                                }
                            }
                        }
                    }
                }
                Op::Sub { a: an, b: bn } => {
                    for &(n, sign) in &[(an, 1.0), (bn, -1.0)] {
                        let nb = self.out(*n);
                        let slot = &mut adj[n.0];
                        if let Some(ov) = &a.val {
                            acc_scaled(&mut slot.val, ov, sign);
                        }
                        for c in 0..MAX_TAN {
                            if nb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc_scaled(&mut slot.tan[c], ot, sign);
                                }
                            }
                        }
                    }
                }
                Op::Mul { a: an, b: bn } => {
                    for (this, other) in [(an, bn), (bn, an)] {
                        let (tb, ob) = (self.out(*this), self.out(*other));
                        let slot = &mut adj[this.0];
                        if let Some(ov) = &a.val {
                            acc_prod(&mut slot.val, ov, &ob.val);
                        }
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(obt)) = (&a.tan[c], &ob.tan[c]) {
                                acc_prod(&mut slot.val, ot, obt);
                            }
                            if tb.has(c) {
                                if let Some(ot) = &a.tan[c] {
                                    acc_prod(&mut slot.tan[c], ot, &ob.val);
                                }
                            }
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let xb = self.out(*x);
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc_scaled(&mut slot.val, ov, *c);
                    }
                    for ch in 0..MAX_TAN {
                        if xb.has(ch) {
                            if let Some(ot) = &a.tan[ch] {
                                acc_scaled(&mut slot.tan[ch], ot, *c);
                            }
                        }
                    }
                }
                Op::AddConst { x } => {
                    let xb = self.out(*x);
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, ov.clone());
                    }
                    for ch in 0..MAX_TAN {
                        if xb.has(ch) {
                            if let Some(ot) = &a.tan[ch] {
                                acc(&mut slot.tan[ch], ot.clone());
                            }
                        }
                    }
                }
                Op::ColMulConst { x, w } => {
                    let xb = self.out(*x);
                    let apply = |m: &Array2<f64>| {
                        let mut o = m.clone();
                        for (mut col, &f) in o.columns_mut().into_iter().zip(w) {
                            col *= f;
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, apply(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], apply(ot));
                            }
                        }
                    }
                }
                Op::Unary { x, f } => {
                    let xb = self.out(*x);
                    let df = xb.val.mapv(|u| f.df(u));
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc_prod(&mut slot.val, ov, &df);
                    }
                    // Second-order term: tangent adjoints couple back into the
                    // value adjoint through f''.
                    let needs_d2 = (0..MAX_TAN).any(|c| a.tan[c].is_some() && xb.has(c));
                    if needs_d2 {
                        let d2 = xb.val.mapv(|u| f.d2f(u));
                        for c in 0..MAX_TAN {
                            if let (Some(ot), Some(xt)) = (&a.tan[c], &xb.tan[c]) {
                                let mut term = ot * xt;
                                term *= &d2;
                                acc(&mut slot.val, term);
                            }
                        }
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc_prod(&mut slot.tan[c], ot, &df);
                            }
                        }
                    }
                }
                Op::MeanRows { x } => {
                    let xb = self.out(*x);
                    let rows = xb.val.nrows();
                    let inv = 1.0 / rows as f64;
                    let spread = |m: &Array2<f64>| {
                        m.broadcast((rows, m.ncols())).unwrap().to_owned() * inv
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::BcastRows { x } => {
                    let xb = self.out(*x);
                    let fold = |m: &Array2<f64>| m.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, fold(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], fold(ot));
                            }
                        }
                    }
                }
                Op::BlockMoment { x, k, w } => {
                    let xb = self.out(*x);
                    let spread = |m: &Array2<f64>| {
                        let mut o = Array2::zeros((m.nrows(), m.ncols() * k));
                        for j in 0..m.ncols() {
                            for (i, &wi) in w.iter().enumerate() {
                                if wi != 0.0 {
                                    let mut dst = o.column_mut(j * k + i);
                                    dst.scaled_add(wi, &m.column(j));
                                }
                            }
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::RepeatBlock { x, k } => {
                    let xb = self.out(*x);
                    let fold = |m: &Array2<f64>| {
                        let n = m.ncols() / k;
                        let mut o = Array2::zeros((m.nrows(), n));
                        for j in 0..n {
                            for i in 0..*k {
                                let src = m.column(j * k + i);
                                let mut dst = o.column_mut(j);
                                dst += &src;
                            }
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, fold(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], fold(ot));
                            }
                        }
                    }
                }
                Op::SelectInBlock { x, k, idx } => {
                    let xb = self.out(*x);
                    let spread = |m: &Array2<f64>| {
                        let mut o = Array2::zeros((m.nrows(), m.ncols() * k));
                        for j in 0..m.ncols() {
                            o.column_mut(j * k + idx).assign(&m.column(j));
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::GatherCols { x, idx } => {
                    let xb = self.out(*x);
                    let spread = |m: &Array2<f64>| {
                        let mut o = Array2::zeros((m.nrows(), xb.val.ncols()));
                        for (j, &i) in idx.iter().enumerate() {
                            let src = m.column(j);
                            let mut dst = o.column_mut(i);
                            dst += &src;
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::MirrorCombine {
                    x,
                    mirror,
                    scale,
                    sign,
                } => {
                    let xb = self.out(*x);
                    let spread = |m: &Array2<f64>| {
                        let mut o = Array2::zeros((m.nrows(), m.ncols()));
                        for (j, &mj) in mirror.iter().enumerate() {
                            {
                                let src = m.column(j);
                                let mut dst = o.column_mut(j);
                                dst.scaled_add(*scale, &src);
                            }
                            {
                                let src = m.column(j);
                                let mut dst = o.column_mut(mj);
                                dst.scaled_add(*scale * *sign, &src);
                            }
                        }
                        o
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::ExtractTangent { x, ch } => {
                    if let Some(ov) = &a.val {
                        acc(&mut adj[x.0].tan[*ch], ov.clone());
                    }
                }
                Op::ValueOnly { x } => {
                    if let Some(ov) = &a.val {
                        acc(&mut adj[x.0].val, ov.clone());
                    }
                }
                Op::MeanAll { x } => {
                    let xb = self.out(*x);
                    let n = (xb.val.nrows() * xb.val.ncols()) as f64;
                    let spread = |m: &Array2<f64>| {
                        Array2::from_elem((xb.val.nrows(), xb.val.ncols()), m[[0, 0]] / n)
                    };
                    let slot = &mut adj[x.0];
                    if let Some(ov) = &a.val {
                        acc(&mut slot.val, spread(ov));
                    }
                    for c in 0..MAX_TAN {
                        if xb.has(c) {
                            if let Some(ot) = &a.tan[c] {
                                acc(&mut slot.tan[c], spread(ot));
                            }
                        }
                    }
                }
                Op::SumScalars { xs } => {
                    if let Some(ov) = &a.val {
                        for &xn in xs {
                            acc(&mut adj[xn.0].val, ov.clone());
                        }
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    if let Some(ov) = &a.val {
                        let (xb, wb) = (self.out(*x), self.out(*w));
                        let (oh, ow) = (spec.out_h(), spec.out_w());
                        let n = xb.val.ncols();
                        let mut dx = Array2::zeros(xb.val.dim());
                        let mut dw = Array2::zeros(wb.val.dim());
                        let mut db = Array2::zeros((spec.out_ch, 1));
                        for col in 0..n {
                            for oc in 0..spec.out_ch {
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let g = ov[[oc * oh * ow + i * ow + j, col]];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        db[[oc, 0]] += g;
                                        for ci in 0..spec.in_ch {
                                            for di in 0..spec.kh {
                                                for dj in 0..spec.kw {
                                                    let r = ci * spec.h * spec.w
                                                        + (i * spec.sh + di) * spec.w
                                                        + (j * spec.sw + dj);
                                                    let wi =
                                                        ci * spec.kh * spec.kw + di * spec.kw + dj;
                                                    dx[[r, col]] += g * wb.val[[oc, wi]];
                                                    dw[[oc, wi]] += g * xb.val[[r, col]];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        acc(&mut adj[x.0].val, dx);
                        acc(&mut adj[w.0].val, dw);
                        acc(&mut adj[b.0].val, db);
                    }
                }
                Op::AvgPool { x, spec } => {
                    if let Some(ov) = &a.val {
                        let xb = self.out(*x);
                        let (oh, ow) = (spec.out_h(), spec.out_w());
                        let inv = 1.0 / (spec.ph * spec.pw) as f64;
                        let mut dx = Array2::zeros(xb.val.dim());
                        for col in 0..xb.val.ncols() {
                            for c in 0..spec.ch {
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let g = ov[[c * oh * ow + i * ow + j, col]] * inv;
                                        for di in 0..spec.ph {
                                            for dj in 0..spec.pw {
                                                let r = c * spec.h * spec.w
                                                    + (i * spec.sh + di) * spec.w
                                                    + (j * spec.sw + dj);
                                                dx[[r, col]] += g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        acc(&mut adj[x.0].val, dx);
                    }
                }
                Op::SumChannels { x, ch, hw } => {
                    if let Some(ov) = &a.val {
                        let mut dx = Array2::zeros((ch * hw, ov.ncols()));
                        for c in 0..*ch {
                            dx.slice_mut(ndarray::s![c * hw..(c + 1) * hw, ..])
                                .assign(ov);
                        }
                        acc(&mut adj[x.0].val, dx);
                    }
                }
            }
        }
        grad
    }
}

/// A point at which a network is evaluated with requested input partials.
#[derive(Debug, Clone)]
pub struct InputPoint {
    pub coords: Vec<f64>,
    pub wrt: Vec<usize>,
}

impl InputPoint {
    pub fn new(coords: Vec<f64>, wrt: Vec<usize>) -> Result<Self> {
        if wrt.len() > MAX_TAN {
            return Err(Error::Config(format!(
                "at most {MAX_TAN} simultaneous input partials are supported, got {}",
                wrt.len()
            )));
        }
        for (i, &w) in wrt.iter().enumerate() {
            if w >= coords.len() {
                return Err(Error::Config(format!(
                    "wrt index {w} out of range for {} coordinates",
                    coords.len()
                )));
            }
            if wrt[..i].contains(&w) {
                return Err(Error::Config(format!("duplicate wrt index {w}")));
            }
        }
        Ok(Self { coords, wrt })
    }
}

/// Scalar evaluation result: value, requested input partials, and optionally
/// the full parameter gradient.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub value: f64,
    pub input_partials: Vec<(usize, f64)>,
    pub param_gradient: Option<Vec<f64>>,
}

/// Evaluates a scalar-output network at one point and returns exact partials
/// with respect to the requested coordinates, plus the parameter gradient of
/// the output value.
///
/// `net_forward` receives the tape and the seeded input leaf (one column,
/// one row per coordinate) and must return a (1,1) node built from tape
/// primitives only.
pub fn eval_with_input_partials<F>(
    net_forward: F,
    params: &ParameterVector,
    point: &InputPoint,
) -> Result<GradientRecord>
where
    F: FnOnce(&mut Tape, NodeRef) -> Result<NodeRef>,
{
    let dim = point.coords.len();
    let mut tape = Tape::new(params);
    let val = Array2::from_shape_vec((dim, 1), point.coords.clone()).expect("column vector");
    let mut seeds: [Option<Array2<f64>>; MAX_TAN] = Default::default();
    for (c, &w) in point.wrt.iter().enumerate() {
        let mut s = Array2::zeros((dim, 1));
        s[[w, 0]] = 1.0;
        seeds[c] = Some(s);
    }
    let leaf = tape.input(val, seeds);
    let out = net_forward(&mut tape, leaf)?;
    if tape.value(out).dim() != (1, 1) {
        return Err(Error::Shape(format!(
            "network output must be scalar, got {:?}",
            tape.value(out).dim()
        )));
    }
    let value = tape.value(out)[[0, 0]];
    let mut input_partials = Vec::with_capacity(point.wrt.len());
    for (c, &w) in point.wrt.iter().enumerate() {
        let t = tape.tangent(out, c).ok_or_else(|| {
            Error::Shape(format!("output carries no tangent for coordinate {w}"))
        })?;
        input_partials.push((w, t[[0, 0]]));
    }
    let grad = tape.backward(out);
    Ok(GradientRecord {
        value,
        input_partials,
        param_gradient: Some(grad),
    })
}

/// Evaluates a scalar loss and its gradient with respect to every parameter.
///
/// The loss may read input tangents (PDE residuals); nesting depth two is
/// exact by construction. Non-finite values are reported with the offending
/// parameter segment.
pub fn grad_loss<F>(params: &ParameterVector, loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> Result<NodeRef>,
{
    let mut tape = Tape::new(params);
    let loss = loss_fn(&mut tape)?;
    if tape.value(loss).dim() != (1, 1) {
        return Err(Error::Shape(format!(
            "loss must be scalar, got {:?}",
            tape.value(loss).dim()
        )));
    }
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::NonFinite("loss value".into()));
    }
    let grad = tape.backward(loss);
    for (i, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of segment '{}'",
                params.layout.segment_name_at(i)
            )));
        }
    }
    Ok((value, grad))
}
