//! Reference density fields for the multiscale transport equation: an
//! asymptotic-preserving micro-macro finite-difference scheme at the
//! quadrature velocities, a Crank-Nicolson solver for the diffusion limit,
//! and heat-kernel convolution oracles for unbounded-domain cross-checks.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::data::{read_bundle, write_bundle, ArrayBundle, InitialFunctionSample};
use crate::error::{Error, Result};
use crate::physics::{ProblemSpec, Side, VELOCITY_NODES};
use crate::quadrature::{gauss_legendre, GaussLegendre};

/// Velocity second moment `<v^2>`, the diffusion coefficient of the limit
/// equation.
pub const DIFFUSION_COEFFICIENT: f64 = 1.0 / 3.0;

/// Fraction of the stability bound actually used for the time step.
pub const CFL_SAFETY: f64 = 0.5;

// Stored history is thinned to about this many uniform intervals.
const STORED_INTERVALS: usize = 100;
// A density exceeding this magnitude is treated as a blown-up run.
const BLOWUP_LIMIT: f64 = 1e8;

/// Largest stable time step of the kinetic scheme on cell width `dx`:
/// the explicit limit diffusion bounds it by 1.5 dx^2, free transport by
/// dx / vmax; the binding one depends on the resolution.
pub fn stability_bound(dx: f64, vmax: f64) -> f64 {
    (1.5 * dx * dx).min(dx / vmax)
}

// ---- grids -----------------------------------------------------------------------

/// Space-time-velocity discretization of one kinetic run.
#[derive(Debug, Clone)]
pub struct KineticGrid {
    /// Cells on [x_L, x_R]; the density lives at cell centers.
    pub nx: usize,
    pub quadrature: GaussLegendre,
    pub dt: f64,
    pub nt: usize,
}

impl KineticGrid {
    /// Grid with the time step set from the stability bound, rounded so the
    /// stored history stays uniform and `nt * dt` lands on the horizon.
    pub fn for_problem(problem: &ProblemSpec, nx: usize) -> Result<Self> {
        problem.validate()?;
        if nx < 4 {
            return Err(Error::Config(format!("kinetic grid needs nx >= 4, got {nx}")));
        }
        let quadrature = GaussLegendre::new(VELOCITY_NODES)?;
        let dx = (problem.x_range.1 - problem.x_range.0) / nx as f64;
        let vmax = quadrature.nodes()[VELOCITY_NODES - 1];
        let target = CFL_SAFETY * stability_bound(dx, vmax);
        let nt = (problem.t_max / target).ceil() as usize;
        let nt = nt.div_ceil(STORED_INTERVALS) * STORED_INTERVALS;
        Ok(KineticGrid {
            nx,
            quadrature,
            dt: problem.t_max / nt as f64,
            nt,
        })
    }

    pub fn dx(&self, x_range: (f64, f64)) -> f64 {
        (x_range.1 - x_range.0) / self.nx as f64
    }

    pub fn cell_centers(&self, x_range: (f64, f64)) -> Vec<f64> {
        let dx = self.dx(x_range);
        (0..self.nx).map(|i| x_range.0 + (i as f64 + 0.5) * dx).collect()
    }
}

/// Node discretization of one heat-equation run; walls are grid nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatGrid {
    pub nx: usize,
    pub nt: usize,
    pub t_max: f64,
    pub x_range: (f64, f64),
}

impl HeatGrid {
    pub fn new(nx: usize, nt: usize, t_max: f64, x_range: (f64, f64)) -> Result<Self> {
        if nx < 3 || nt == 0 {
            return Err(Error::Config(format!(
                "heat grid needs nx >= 3 and nt >= 1, got nx = {nx}, nt = {nt}"
            )));
        }
        if !(t_max > 0.0) || !(x_range.0 < x_range.1) {
            return Err(Error::Config(format!(
                "heat grid needs t_max > 0 and an increasing x range, got {t_max}, {x_range:?}"
            )));
        }
        Ok(HeatGrid { nx, nt, t_max, x_range })
    }

    /// Resolution with dt ~ dx, rounded so the stored history stays uniform.
    pub fn for_problem(problem: &ProblemSpec, nx: usize) -> Result<Self> {
        problem.validate()?;
        let dx = (problem.x_range.1 - problem.x_range.0) / (nx.max(3) - 1) as f64;
        let nt = ((problem.t_max / dx).ceil() as usize).max(STORED_INTERVALS);
        let nt = nt.div_ceil(STORED_INTERVALS) * STORED_INTERVALS;
        HeatGrid::new(nx, nt, problem.t_max, problem.x_range)
    }

    pub fn dx(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.nt as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.nx).map(|j| self.x_range.0 + j as f64 * dx).collect()
    }
}

// Coarsest recording stride that still divides nt, so recorded times stay
// uniform and include both endpoints.
fn history_stride(nt: usize) -> usize {
    let lo = nt.div_ceil(STORED_INTERVALS).max(1);
    (lo..=nt).find(|s| nt % s == 0).unwrap_or(nt)
}

// ---- density history -------------------------------------------------------------

/// Density history rho(t_i, x_j) on uniform grids.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    /// Shape (t_grid.len(), x_grid.len()).
    pub rho: Array2<f64>,
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
}

fn check_uniform(grid: &[f64], what: &str) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Shape(format!("{what} grid needs at least 2 points")));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) {
        return Err(Error::Config(format!("{what} grid must be increasing")));
    }
    let scale = h.abs().max(grid[grid.len() - 1].abs());
    for w in grid.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * scale {
            return Err(Error::Config(format!("{what} grid is not uniform")));
        }
    }
    Ok(())
}

// Segment index and local coordinate on a uniform grid; the local coordinate
// is left unclamped so edge segments extend linearly.
fn locate_uniform(grid: &[f64], c: f64) -> (usize, f64) {
    let h = grid[1] - grid[0];
    let i = (((c - grid[0]) / h).floor() as isize).clamp(0, grid.len() as isize - 2) as usize;
    (i, (c - grid[i]) / h)
}

impl DensityField {
    pub fn validate(&self) -> Result<()> {
        check_uniform(&self.t_grid, "time")?;
        check_uniform(&self.x_grid, "space")?;
        if self.rho.dim() != (self.t_grid.len(), self.x_grid.len()) {
            return Err(Error::Shape(format!(
                "density shape {:?} does not match grids ({}, {})",
                self.rho.dim(),
                self.t_grid.len(),
                self.x_grid.len()
            )));
        }
        if self.rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density field".into()));
        }
        Ok(())
    }

    /// Bilinear interpolation; points beyond the grid follow the edge
    /// segments linearly (the kinetic grid stores cell centers, so wall
    /// values sit half a cell outside).
    pub fn interp(&self, t: f64, x: f64) -> f64 {
        let (i, st) = locate_uniform(&self.t_grid, t);
        let (j, sx) = locate_uniform(&self.x_grid, x);
        let f = &self.rho;
        (1.0 - st) * ((1.0 - sx) * f[[i, j]] + sx * f[[i, j + 1]])
            + st * ((1.0 - sx) * f[[i + 1, j]] + sx * f[[i + 1, j + 1]])
    }

    /// Interpolates the history onto an evaluation grid.
    pub fn resample(&self, ts: &[f64], xs: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((ts.len(), xs.len()), |(i, j)| self.interp(ts[i], xs[j]))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "t\\x")?;
        for x in &self.x_grid {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
        for (i, t) in self.t_grid.iter().enumerate() {
            write!(w, "{t}")?;
            for j in 0..self.x_grid.len() {
                write!(w, ",{}", self.rho[[i, j]])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let row = |g: &[f64]| Array2::from_shape_vec((1, g.len()), g.to_vec()).expect("grid row");
        let bundle = ArrayBundle {
            meta,
            arrays: vec![
                ("t_grid".into(), row(&self.t_grid)),
                ("x_grid".into(), row(&self.x_grid)),
                ("rho".into(), self.rho.clone()),
            ],
        };
        write_bundle(path, &bundle)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bundle = read_bundle(path)?;
        let mut t_grid = None;
        let mut x_grid = None;
        let mut rho = None;
        for (name, arr) in bundle.arrays {
            match name.as_str() {
                "t_grid" => t_grid = Some(arr.row(0).to_vec()),
                "x_grid" => x_grid = Some(arr.row(0).to_vec()),
                "rho" => rho = Some(arr),
                _ => {}
            }
        }
        let field = DensityField {
            rho: rho.ok_or_else(|| Error::Format("bundle is missing array rho".into()))?,
            t_grid: t_grid.ok_or_else(|| Error::Format("bundle is missing array t_grid".into()))?,
            x_grid: x_grid.ok_or_else(|| Error::Format("bundle is missing array x_grid".into()))?,
        };
        field.validate()?;
        Ok((field, bundle.meta))
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Uniform evaluation grid shared by error metrics: 50 times on [0, t_max]
/// and 32 positions across the domain.
pub fn default_eval_grid(problem: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
    (
        linspace(0.0, problem.t_max, 50),
        linspace(problem.x_range.0, problem.x_range.1, 32),
    )
}

// ---- kinetic scheme ---------------------------------------------------------------

/// Time-marches the micro-macro system with the collision term implicit and
/// upwinded transport: the density rho lives at cell centers, the
/// fluctuation g at cell faces. Incoming wall data enters through the
/// prescribed distribution, outgoing through first-order extrapolation, and
/// the wall flux acts on the adjacent cell implicitly so the scheme stays
/// uniform in eps.
pub fn solve_transport_ap(
    problem: &ProblemSpec,
    grid: &KineticGrid,
    f0: &InitialFunctionSample,
) -> Result<DensityField> {
    problem.validate()?;
    let nx = grid.nx;
    let nv = grid.quadrature.len();
    if nx < 4 {
        return Err(Error::Config(format!("kinetic grid needs nx >= 4, got {nx}")));
    }
    if (grid.nt as f64 * grid.dt - problem.t_max).abs() > 1e-9 * problem.t_max.max(1.0) {
        return Err(Error::Config(format!(
            "grid horizon nt * dt = {} does not match t_max = {}",
            grid.nt as f64 * grid.dt,
            problem.t_max
        )));
    }

    let eps = problem.eps;
    let dt = grid.dt;
    let dx = grid.dx(problem.x_range);
    let v = grid.quadrature.nodes().to_vec();
    let w = grid.quadrature.weights().to_vec();
    let vmax = v[nv - 1];
    let phi_l = problem.prescribed(Side::Left);
    let phi_r = problem.prescribed(Side::Right);
    // first moment of the incoming half-range, <v>_+
    let c_in: f64 = v.iter().zip(&w).filter(|(vv, _)| **vv > 0.0).map(|(vv, ww)| vv * ww).sum();

    let centers = grid.cell_centers(problem.x_range);
    let faces: Vec<f64> = (0..=nx).map(|i| problem.x_range.0 + i as f64 * dx).collect();

    // rho = <f0> at centers; g = (f0 - <f0>)/eps at faces, projected so the
    // discrete fluctuation carries no density
    let mut rho = vec![0.0; nx];
    let mut fv = vec![0.0; nv];
    for (i, &x) in centers.iter().enumerate() {
        for (k, val) in fv.iter_mut().enumerate() {
            *val = f0.interp(x, v[k]);
        }
        rho[i] = grid.quadrature.moment(&fv)?;
    }
    // g is face-major: g[f * nv + k]
    let mut g = vec![0.0; (nx + 1) * nv];
    for (f, &x) in faces.iter().enumerate() {
        for (k, val) in fv.iter_mut().enumerate() {
            *val = f0.interp(x, v[k]);
        }
        let mean = grid.quadrature.moment(&fv)?;
        let col = &mut g[f * nv..(f + 1) * nv];
        for k in 0..nv {
            col[k] = (fv[k] - mean) / eps;
        }
        let residue = grid.quadrature.moment(col)?;
        for gk in col.iter_mut() {
            *gk -= residue;
        }
    }

    let stride = history_stride(grid.nt);
    let mut times = Vec::with_capacity(grid.nt / stride + 1);
    let mut history = Vec::with_capacity(grid.nt / stride + 1);
    times.push(0.0);
    history.push(rho.clone());

    let denom = eps * eps + dt;
    let a_wall = dt * c_in / (eps * dx);
    let mut g_new = g.clone();
    let mut flux = vec![0.0; nx + 1];
    let mut transport = vec![0.0; nv];
    let scale0 = rho.iter().fold(1.0f64, |m, r| m.max(r.abs()));

    for step in 0..grid.nt {
        let t_n = step as f64 * dt;

        // wall-face closure at time n: prescribed data incoming, first-order
        // extrapolation outgoing
        for k in 0..nv {
            g[k] = if v[k] > 0.0 { (phi_l - rho[0]) / eps } else { g[nv + k] };
            g[nx * nv + k] = if v[k] < 0.0 {
                (phi_r - rho[nx - 1]) / eps
            } else {
                g[(nx - 1) * nv + k]
            };
        }

        // micro step on interior faces, collision implicit
        for f in 1..nx {
            let (left, rest) = g.split_at((f) * nv);
            let (center, right) = rest.split_at(nv);
            let left = &left[(f - 1) * nv..];
            for k in 0..nv {
                let dgdx = if v[k] > 0.0 {
                    (center[k] - left[k]) / dx
                } else {
                    (right[k] - center[k]) / dx
                };
                transport[k] = v[k] * dgdx;
            }
            let mean_t = grid.quadrature.moment(&transport)?;
            let drho = (rho[f] - rho[f - 1]) / dx;
            let out = &mut g_new[f * nv..(f + 1) * nv];
            for k in 0..nv {
                out[k] = (eps * eps * center[k]
                    - dt * (eps * (transport[k] - mean_t) + v[k] * drho))
                    / denom;
            }
            let residue = grid.quadrature.moment(out)?;
            for gk in out.iter_mut() {
                *gk -= residue;
            }
        }

        // interior fluxes <v g>
        for f in 1..nx {
            flux[f] = grid.quadrature.first_moment(&g_new[f * nv..(f + 1) * nv])?;
        }

        // macro step; wall-adjacent cells treat the incoming flux implicitly,
        // which pins the cell to the prescribed value as eps -> 0
        let mut blowup = false;
        for i in 1..nx - 1 {
            rho[i] += dt * (problem.source_at(t_n, centers[i]) - (flux[i + 1] - flux[i]) / dx);
            blowup |= !rho[i].is_finite() || rho[i].abs() > BLOWUP_LIMIT * scale0;
        }
        let out_l: f64 = v
            .iter()
            .zip(&w)
            .enumerate()
            .filter(|(_, (vv, _))| **vv < 0.0)
            .map(|(k, (vv, ww))| ww * vv * g_new[nv + k])
            .sum();
        rho[0] = (rho[0] + dt * (problem.source_at(t_n, centers[0]) - (flux[1] - out_l) / dx)
            + a_wall * phi_l)
            / (1.0 + a_wall);
        let out_r: f64 = v
            .iter()
            .zip(&w)
            .enumerate()
            .filter(|(_, (vv, _))| **vv > 0.0)
            .map(|(k, (vv, ww))| ww * vv * g_new[(nx - 1) * nv + k])
            .sum();
        rho[nx - 1] = (rho[nx - 1]
            + dt * (problem.source_at(t_n, centers[nx - 1]) - (out_r - flux[nx - 1]) / dx)
            + a_wall * phi_r)
            / (1.0 + a_wall);
        blowup |= !rho[0].is_finite()
            || !rho[nx - 1].is_finite()
            || rho[0].abs() > BLOWUP_LIMIT * scale0
            || rho[nx - 1].abs() > BLOWUP_LIMIT * scale0;

        if blowup {
            return Err(Error::NonConvergence {
                what: format!(
                    "density blow-up; dt = {dt:.3e} violates the stability bound {:.3e} = min(1.5 dx^2, dx/vmax) at dx = {dx:.3e}",
                    stability_bound(dx, vmax)
                ),
                iterations: step + 1,
            });
        }

        std::mem::swap(&mut g, &mut g_new);
        if (step + 1) % stride == 0 {
            times.push((step + 1) as f64 * dt);
            history.push(rho.clone());
        }
    }

    let rho = Array2::from_shape_fn((history.len(), nx), |(i, j)| history[i][j]);
    let field = DensityField {
        rho,
        t_grid: times,
        x_grid: centers,
    };
    field.validate()?;
    Ok(field)
}

// ---- diffusion-limit solver ---------------------------------------------------------

/// Crank-Nicolson march of rho_t = k rho_xx + Q with fixed Dirichlet walls.
pub fn solve_heat_cn(
    k: f64,
    source: impl Fn(f64, f64) -> f64,
    rho0: &[f64],
    boundary: (f64, f64),
    grid: &HeatGrid,
) -> Result<DensityField> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("diffusion coefficient must be positive, got {k}")));
    }
    if rho0.len() != grid.nx {
        return Err(Error::Shape(format!(
            "initial density has {} values for {} nodes",
            rho0.len(),
            grid.nx
        )));
    }
    let nx = grid.nx;
    let dt = grid.dt();
    let dx = grid.dx();
    let mu = k * dt / (dx * dx);
    let nodes = grid.nodes();

    let mut rho = rho0.to_vec();
    let stride = history_stride(grid.nt);
    let mut times = Vec::with_capacity(grid.nt / stride + 1);
    let mut history = Vec::with_capacity(grid.nt / stride + 1);
    times.push(0.0);
    history.push(rho.clone());

    // constant tridiagonal (I - mu/2 L) on interior nodes
    let n_in = nx - 2;
    let diag = vec![1.0 + mu; n_in];
    let off = -0.5 * mu;
    let mut rhs = vec![0.0; n_in];
    let mut scratch = vec![0.0; n_in];

    for step in 0..grid.nt {
        let t_n = step as f64 * dt;
        let t_np = (step + 1) as f64 * dt;
        for j in 1..nx - 1 {
            let lap = rho[j - 1] - 2.0 * rho[j] + rho[j + 1];
            let q = 0.5 * (source(t_n, nodes[j]) + source(t_np, nodes[j]));
            rhs[j - 1] = rho[j] + 0.5 * mu * lap + dt * q;
        }
        // Dirichlet values fold into the first and last equations
        rhs[0] -= off * boundary.0;
        rhs[n_in - 1] -= off * boundary.1;
        thomas_constant(off, &diag, off, &mut rhs, &mut scratch);
        rho[0] = boundary.0;
        rho[nx - 1] = boundary.1;
        rho[1..nx - 1].copy_from_slice(&rhs);

        if (step + 1) % stride == 0 {
            times.push(t_np);
            history.push(rho.clone());
        }
    }

    let rho = Array2::from_shape_fn((history.len(), nx), |(i, j)| history[i][j]);
    let field = DensityField {
        rho,
        t_grid: times,
        x_grid: nodes,
    };
    field.validate()?;
    Ok(field)
}

// Thomas solve for a constant-coefficient tridiagonal system; the matrix is
// strictly diagonally dominant here so pivots never vanish.
fn thomas_constant(lower: f64, diag: &[f64], upper: f64, rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    let mut pivot = diag[0];
    assert!(pivot != 0.0, "singular tridiagonal pivot");
    scratch[0] = upper / pivot;
    rhs[0] /= pivot;
    for i in 1..n {
        pivot = diag[i] - lower * scratch[i - 1];
        assert!(pivot != 0.0, "singular tridiagonal pivot");
        scratch[i] = upper / pivot;
        rhs[i] = (rhs[i] - lower * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Dirichlet values of the limit equation implied by the kinetic boundary
/// data (constant incoming data carries over unchanged).
pub fn heat_boundary(problem: &ProblemSpec) -> (f64, f64) {
    (problem.prescribed(Side::Left), problem.prescribed(Side::Right))
}

// ---- heat kernel and convolutions ----------------------------------------------------

/// Fundamental solution (4 pi k t)^{-1/2} exp(-x^2 / (4 k t)).
pub fn heat_kernel(t: f64, x: f64, k: f64) -> Result<f64> {
    if !(t > 0.0) || !(k > 0.0) {
        return Err(Error::Config(format!(
            "heat kernel needs t > 0 and k > 0, got t = {t}, k = {k}"
        )));
    }
    Ok((4.0 * std::f64::consts::PI * k * t).sqrt().recip() * (-x * x / (4.0 * k * t)).exp())
}

const CONV_TOL: f64 = 1e-9;
const CONV_START_PANELS: usize = 64;
const CONV_MAX_DOUBLINGS: usize = 12;

// Composite Simpson refinement of integrand over [a, b] until successive
// doublings agree to CONV_TOL.
fn refine_simpson(integrand: &impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    let simpson = |n: usize| -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = integrand(a) + integrand(b);
        for i in 1..n {
            let c = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += c * integrand(a + i as f64 * h);
        }
        acc * h / 3.0
    };
    let mut n = CONV_START_PANELS;
    let mut prev = simpson(n);
    let mut achieved = f64::INFINITY;
    for _ in 0..CONV_MAX_DOUBLINGS {
        n *= 2;
        let cur = simpson(n);
        achieved = (cur - prev).abs();
        if achieved <= CONV_TOL * cur.abs().max(1.0) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::NonConvergence {
        what: format!("convolution quadrature achieved {achieved:.3e}, wanted {CONV_TOL:.1e}"),
        iterations: CONV_MAX_DOUBLINGS,
    })
}

/// Free-space heat evolution of initial data g by the Poisson formula,
/// u(t, x) = integral of Phi(t, x - y) g(y) dy over the kernel's support.
pub fn heat_convolution(
    g: impl Fn(f64) -> f64,
    t: f64,
    k: f64,
    x_eval: &[f64],
) -> Result<Vec<f64>> {
    if !(t > 0.0) || !(k > 0.0) {
        return Err(Error::Config(format!(
            "heat convolution needs t > 0 and k > 0, got t = {t}, k = {k}"
        )));
    }
    // kernel mass beyond 12 sqrt(kt) is ~1e-17 of the total
    let half = 12.0 * (k * t).sqrt();
    x_eval
        .iter()
        .map(|&x| {
            let integrand = |y: f64| heat_kernel(t, x - y, k).expect("t, k checked") * g(y);
            refine_simpson(&integrand, x - half, x + half)
        })
        .collect()
}

const DUHAMEL_NODES: [usize; 4] = [8, 16, 32, 64];
const DUHAMEL_TOL: f64 = 1e-8;

/// Inhomogeneous free-space solution: the Poisson term for the initial data
/// plus the time-folded source integral.
pub fn duhamel(
    g: impl Fn(f64) -> f64,
    source: impl Fn(f64, f64) -> f64,
    t: f64,
    k: f64,
    x_eval: &[f64],
) -> Result<Vec<f64>> {
    let mut u = heat_convolution(&g, t, k, x_eval)?;
    // Gauss-Legendre in s over (0, t); interior nodes keep t - s positive
    let mut prev: Option<Vec<f64>> = None;
    let mut achieved = f64::INFINITY;
    for m in DUHAMEL_NODES {
        let (xi, wt) = gauss_legendre(m)?;
        let mut acc = vec![0.0; x_eval.len()];
        for (node, weight) in xi.iter().zip(&wt) {
            let s = 0.5 * t * (node + 1.0);
            let slice = heat_convolution(|y| source(s, y), t - s, k, x_eval)?;
            // halved weights sum to 1, so the interval measure is t, not t/2
            for (a, val) in acc.iter_mut().zip(&slice) {
                *a += weight * t * val;
            }
        }
        if let Some(p) = &prev {
            achieved = acc
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if achieved <= DUHAMEL_TOL {
                for (ui, a) in u.iter_mut().zip(&acc) {
                    *ui += a;
                }
                return Ok(u);
            }
        }
        prev = Some(acc);
    }
    Err(Error::NonConvergence {
        what: format!("source time integral achieved {achieved:.3e}, wanted {DUHAMEL_TOL:.1e}"),
        iterations: DUHAMEL_NODES.len(),
    })
}
