//! Gauss-Legendre quadrature on the velocity interval [-1, 1].
//!
//! Velocity averages throughout the crate use the normalized measure dv/2,
//! so the weights returned here sum to one:
//! `<phi> = sum_k w_k phi(v_k) ~ (1/2) integral of phi over [-1, 1]`.

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

/// Nodes and weights of an n-point Gauss-Legendre rule, normalized against
/// the measure dv/2 on [-1, 1].
///
/// Only even point counts are accepted: the velocity grid must be symmetric
/// under v -> -v so that parity decompositions pair nodes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on the Legendre polynomial roots.
    pub fn new(n: usize) -> Result<Self> {
        let (nodes, weights) = gauss_legendre(n)?;
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending order; node[i] == -node[n-1-i] bit-exactly.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights matching `nodes`; they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the node mirroring node `k` under v -> -v.
    pub fn mirror(&self, k: usize) -> usize {
        self.nodes.len() - 1 - k
    }

    /// Velocity average `<values> = sum_k w_k values[k]`.
    pub fn moment(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.nodes.len() {
            return Err(Error::Shape(format!(
                "moment over {} values with a {}-point rule",
                values.len(),
                self.nodes.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(values)
            .map(|(w, f)| w * f)
            .sum())
    }

    /// Velocity average of v * values, `<v values>`.
    pub fn first_moment(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.nodes.len() {
            return Err(Error::Shape(format!(
                "first_moment over {} values with a {}-point rule",
                values.len(),
                self.nodes.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.nodes)
            .zip(values)
            .map(|((w, v), f)| w * v * f)
            .sum())
    }
}

/// Nodes and halved weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Weights are halved relative to the textbook rule so that summing against
/// them realizes the normalized average over velocity space.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "quadrature order must be even and at least 2, got {n}"
        )));
    }

    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];

    // Roots come in symmetric pairs; solve for the positive half and mirror
    // so the symmetry holds bit-exactly.
    for i in 0..n / 2 {
        // Tricomi-style initial guess for the i-th largest root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut converged = false;

        for _ in 0..NEWTON_MAX_ITER {
            let (pn, pn_prev) = legendre_pair(n, x);
            // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
            let deriv = n as f64 * (x * pn - pn_prev) / (x * x - 1.0);
            let dx = pn / deriv;
            x -= dx;
            if dx.abs() <= NEWTON_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                what: format!("Newton iteration for Legendre root {i} of order {n}"),
                iterations: NEWTON_MAX_ITER,
            });
        }

        // One clean-up pass so the residual is at roundoff.
        let (pn, pn_prev) = legendre_pair(n, x);
        let deriv = n as f64 * (x * pn - pn_prev) / (x * x - 1.0);
        x -= pn / deriv;

        // Halved textbook weight: 1 / ((1 - x^2) P_n'(x)^2).
        let w = 1.0 / ((1.0 - x * x) * deriv * deriv);

        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }

    Ok((nodes, weights))
}

/// Evaluates (P_n(x), P_{n-1}(x)) by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let k = k as f64;
        let p_next = ((2.0 * k - 1.0) * x * p - (k - 1.0) * p_prev) / k;
        p_prev = p;
        p = p_next;
    }
    (p, p_prev)
}
