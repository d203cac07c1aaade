//! Central-difference checks for engine gradients.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Symmetric relative difference between two gradients; the denominator is
/// floored so agreement near zero is not penalized.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compares the engine gradient of `f` at `x` against central differences
/// with step `h`, returning the maximum symmetric relative error.
pub fn fd_check<F>(f: F, engine_grad: &[f64], x: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let fd = central_grad(f, x, h);
    max_rel_err(engine_grad, &fd)
}
