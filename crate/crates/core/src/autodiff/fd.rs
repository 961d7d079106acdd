//! Finite-difference helpers and a flat Picard solver for oracle checks.

/// Central-difference gradient of a scalar function.
pub fn central_grad(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Plain Picard iteration on a flat step function, starting from h = 0.
/// Stops when the relative infinity-norm update falls below `tol`.
pub fn flat_picard_solve(
    step: &impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    h_dim: usize,
    tol: f64,
    max_iters: usize,
) -> Vec<f64> {
    let mut h = vec![0.0; h_dim];
    for _ in 0..max_iters {
        let hn = step(x, &h);
        let inc = h
            .iter()
            .zip(hn.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = hn.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        h = hn;
        if inc / scale < tol {
            break;
        }
    }
    h
}
