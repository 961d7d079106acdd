//! Implicit-differentiation oracle for small instances.
//!
//! Materializes the step Jacobians by central-difference column probes and
//! evaluates upstreamᵀ (I - J_h)⁻¹ J_x. Verification path only; training
//! never goes through here.

use super::fd::{central_grad, flat_picard_solve};
use crate::numerics::{Mat, VecD};
use crate::{FpError, Result};

const PROBE_EPS: f64 = 1e-6;
const MAX_STATE_DIM: usize = 512;

fn jacobian_h(
    step: &impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    h: &[f64],
) -> Mat {
    let n = h.len();
    let mut j = Mat::zeros(n, n);
    let mut hp = h.to_vec();
    for col in 0..n {
        let orig = hp[col];
        hp[col] = orig + PROBE_EPS;
        let fp = step(x, &hp);
        hp[col] = orig - PROBE_EPS;
        let fm = step(x, &hp);
        hp[col] = orig;
        for row in 0..n {
            j.data[row * n + col] = (fp[row] - fm[row]) / (2.0 * PROBE_EPS);
        }
    }
    j
}

fn jacobian_x(
    step: &impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    h: &[f64],
) -> Mat {
    let n = h.len();
    let m = x.len();
    let mut j = Mat::zeros(n, m);
    let mut xp = x.to_vec();
    for col in 0..m {
        let orig = xp[col];
        xp[col] = orig + PROBE_EPS;
        let fp = step(&xp, h);
        xp[col] = orig - PROBE_EPS;
        let fm = step(&xp, h);
        xp[col] = orig;
        for row in 0..n {
            j.data[row * m + col] = (fp[row] - fm[row]) / (2.0 * PROBE_EPS);
        }
    }
    j
}

/// upstreamᵀ (I - J_h)⁻¹ J_x at the fixed point, i.e. the gradient of
/// ⟨upstream, h*(x)⟩ with respect to x through the full implicit solution.
///
/// Errors when (I - J_h) is singular, which signals a non-contractive step.
pub fn implicit_gradient_small(
    step: &impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    h_star: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let n = h_star.len();
    if n > MAX_STATE_DIM {
        return Err(FpError::InvalidConfig(format!(
            "implicit_gradient_small materializes Jacobians; state dim {n} exceeds {MAX_STATE_DIM}"
        )));
    }
    assert_eq!(upstream.len(), n, "upstream dim");
    let jh = jacobian_h(step, x, h_star);
    let jx = jacobian_x(step, x, h_star);
    // Solve (I - J_h)ᵀ w = upstream, then grad = J_xᵀ w.
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            a.data[i * n + j] = delta - jh.data[j * n + i];
        }
    }
    let w = a.solve(&VecD::from(upstream.to_vec())).map_err(|_| FpError::Singular {
        context: "(I - J_h) in implicit differentiation".into(),
    })?;
    Ok(jx.matvec_t(&w).data)
}

/// Gradient of ⟨upstream, step(x, h)⟩ in x with h held fixed: the
/// gradient-at-the-fixed-point (no unrolling) in flat form.
pub fn k0_gradient_flat(
    step: &impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    h: &[f64],
    upstream: &[f64],
) -> Vec<f64> {
    central_grad(
        &mut |xs: &[f64]| {
            let out = step(xs, h);
            out.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        },
        x,
        PROBE_EPS,
    )
}

/// One instance for the descent-direction suite: a step whose dependence on
/// x and h is supposed to enter only through x + h, plus a probe upstream.
pub struct DescentInstance<'a> {
    pub step: &'a dyn Fn(&[f64], &[f64]) -> Vec<f64>,
    pub x: Vec<f64>,
    pub upstream: Vec<f64>,
}

/// For each instance: solve the fixed point, compute the
/// gradient-at-the-fixed-point g and the implicit gradient g*, and return
/// the fraction of instances with ⟨g*, g⟩ > 0.
pub fn descent_direction_check(instances: &[DescentInstance<'_>]) -> Result<f64> {
    let mut descending = 0usize;
    for inst in instances {
        let h_dim = (inst.step)(&inst.x, &vec![0.0; inst.upstream.len()]).len();
        let h_star = flat_picard_solve(&inst.step, &inst.x, h_dim, 1e-13, 10_000);
        let g = k0_gradient_flat(&inst.step, &inst.x, &h_star, &inst.upstream);
        let g_star = implicit_gradient_small(&inst.step, &inst.x, &h_star, &inst.upstream)?;
        let inner: f64 = g.iter().zip(g_star.iter()).map(|(a, b)| a * b).sum();
        if inner > 0.0 {
            descending += 1;
        }
    }
    Ok(descending as f64 / instances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_contraction_closed_form() {
        // f(x, h) = 0.5 h + x has fixed point h* = 2x; d h*/dx = 2,
        // while the gradient-at-the-fixed-point is 1.
        let step = |x: &[f64], h: &[f64]| vec![0.5 * h[0] + x[0]];
        let h_star = flat_picard_solve(&step, &[1.0], 1, 1e-14, 1000);
        assert!((h_star[0] - 2.0).abs() < 1e-10);
        let gi = implicit_gradient_small(&step, &[1.0], &h_star, &[1.0]).unwrap();
        assert!((gi[0] - 2.0).abs() < 1e-6, "implicit {}", gi[0]);
        let g0 = k0_gradient_flat(&step, &[1.0], &h_star, &[1.0]);
        assert!((g0[0] - 1.0).abs() < 1e-8, "k0 {}", g0[0]);
        assert!(gi[0] * g0[0] > 0.0);
    }

    #[test]
    fn zero_state_jacobian_reduces_to_chain_rule() {
        // f(x, h) = tanh-free affine map of x only: implicit == one-step.
        let step = |x: &[f64], _h: &[f64]| vec![0.3 * x[0] + 0.1 * x[1], -0.2 * x[0]];
        let x = [0.7, -0.4];
        let h_star = flat_picard_solve(&step, &x, 2, 1e-14, 100);
        let up = [1.0, 2.0];
        let gi = implicit_gradient_small(&step, &x, &h_star, &up).unwrap();
        let g0 = k0_gradient_flat(&step, &x, &h_star, &up);
        for i in 0..2 {
            assert!((gi[i] - g0[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn implicit_matches_finite_difference_of_full_solve() {
        // Random 8-dim contraction with dependence through x + h.
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 8;
        let mut j = vec![0.0; d * d];
        for v in j.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        // scale to spectral norm ~0.6
        let jm = Mat {
            rows: d,
            cols: d,
            data: j.clone(),
        };
        let sn = crate::numerics::spectral_norm(&jm, 200, 0).unwrap();
        let j: Vec<f64> = j.iter().map(|v| v * 0.6 / sn).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let step = move |x: &[f64], h: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for r in 0..d {
                let mut acc = b[r];
                for c in 0..d {
                    acc += j[r * d + c] * (x[c] + h[c]).tanh();
                }
                out[r] = acc;
            }
            out
        };
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let upstream: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let h_star = flat_picard_solve(&step, &x, d, 1e-13, 100_000);
        let gi = implicit_gradient_small(&step, &x, &h_star, &upstream).unwrap();

        let mut full = |xs: &[f64]| -> f64 {
            let h = flat_picard_solve(&step, xs, d, 1e-13, 100_000);
            h.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };
        let fd = central_grad(&mut full, &x, 1e-5);
        for i in 0..d {
            let denom = gi[i].abs().max(fd[i].abs()).max(1e-6);
            assert!(
                (gi[i] - fd[i]).abs() / denom < 1e-4,
                "dim {i}: implicit {} vs fd {}",
                gi[i],
                fd[i]
            );
        }
    }
}
