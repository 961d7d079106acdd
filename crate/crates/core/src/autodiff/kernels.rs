//! Shared forward math for both engines.
//!
//! Every operation the tape can record has its forward computation here, so
//! plain evaluation and recorded evaluation produce bitwise-identical values.

use super::value::Arr;
use crate::numerics::{self, Mat, VecD};

/// Elementwise map kinds with known derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Exp,
    Sigmoid,
    Softplus,
    Silu,
    Neg,
    OneMinus,
}

pub(crate) fn map(kind: MapKind, a: &Arr) -> Arr {
    let f: fn(f64) -> f64 = match kind {
        MapKind::Exp => f64::exp,
        MapKind::Sigmoid => numerics::sigmoid,
        MapKind::Softplus => numerics::softplus,
        MapKind::Silu => numerics::silu,
        MapKind::Neg => |z| -z,
        MapKind::OneMinus => |z| 1.0 - z,
    };
    let mut out = a.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

/// Derivative of `kind` given input and output values.
pub(crate) fn map_derivative(kind: MapKind, input: f64, output: f64) -> f64 {
    match kind {
        MapKind::Exp => output,
        MapKind::Sigmoid => output * (1.0 - output),
        MapKind::Softplus => numerics::sigmoid(input),
        MapKind::Silu => {
            let s = numerics::sigmoid(input);
            s * (1.0 + input * (1.0 - s))
        }
        MapKind::Neg => -1.0,
        MapKind::OneMinus => -1.0,
    }
}

pub(crate) fn add(a: &Arr, b: &Arr) -> Arr {
    assert!(a.same_shape(b), "add: {} vs {}", a.shape_str(), b.shape_str());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o += v;
    }
    out
}

pub(crate) fn sub(a: &Arr, b: &Arr) -> Arr {
    assert!(a.same_shape(b), "sub: {} vs {}", a.shape_str(), b.shape_str());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o -= v;
    }
    out
}

pub(crate) fn hadamard(a: &Arr, b: &Arr) -> Arr {
    assert!(a.same_shape(b), "hadamard: {} vs {}", a.shape_str(), b.shape_str());
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o *= v;
    }
    out
}

pub(crate) fn scale(a: &Arr, c: f64) -> Arr {
    let mut out = a.clone();
    for o in out.data_mut() {
        *o *= c;
    }
    out
}

/// s is a 1-element value; out = s * a elementwise.
pub(crate) fn smul(s: &Arr, a: &Arr) -> Arr {
    scale(a, s.as_scalar())
}

pub(crate) fn dot(a: &Arr, b: &Arr) -> Arr {
    Arr::scalar(a.as_vec().dot(b.as_vec()))
}

pub(crate) fn matvec(m: &Arr, v: &Arr) -> Arr {
    Arr::V(m.as_mat().matvec(v.as_vec()))
}

pub(crate) fn matvec_t(m: &Arr, v: &Arr) -> Arr {
    Arr::V(m.as_mat().matvec_t(v.as_vec()))
}

pub(crate) fn outer(u: &Arr, v: &Arr) -> Arr {
    Arr::M(u.as_vec().outer(v.as_vec()))
}

pub(crate) fn matmul(a: &Arr, b: &Arr) -> Arr {
    Arr::M(a.as_mat().matmul(b.as_mat()))
}

pub(crate) fn matmul_nt(a: &Arr, b: &Arr) -> Arr {
    Arr::M(a.as_mat().matmul_nt(b.as_mat()))
}

/// out[s, j] = m[s, j] * v[j]
pub(crate) fn row_scale(m: &Arr, v: &Arr) -> Arr {
    let mm = m.as_mat();
    let vv = v.as_vec();
    assert_eq!(mm.cols, vv.dim(), "row_scale shape");
    let mut out = mm.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for (o, s) in row.iter_mut().zip(vv.data.iter()) {
            *o *= s;
        }
    }
    Arr::M(out)
}

pub(crate) fn row(m: &Arr, idx: usize) -> Arr {
    Arr::V(VecD::from(m.as_mat().row(idx).to_vec()))
}

pub(crate) fn l2_normalize(a: &Arr, eps: f64) -> Arr {
    Arr::V(numerics::l2_normalize(a.as_vec(), eps))
}

/// Build an s x s lower-triangular matrix from s(s+1)/2 entries, rows first:
/// (0,0), (1,0), (1,1), (2,0), ...
pub(crate) fn lower_tri(v: &Arr, s: usize) -> Arr {
    let vv = v.as_vec();
    assert_eq!(vv.dim(), s * (s + 1) / 2, "lower_tri entry count");
    let mut m = Mat::zeros(s, s);
    let mut k = 0;
    for i in 0..s {
        for j in 0..=i {
            m.data[i * s + j] = vv.data[k];
            k += 1;
        }
    }
    Arr::M(m)
}

/// Column-major reshape of a length s*s vector into an s x s matrix:
/// out[i, j] = v[i + j*s].
pub(crate) fn mat_c(v: &Arr, s: usize) -> Arr {
    let vv = v.as_vec();
    assert_eq!(vv.dim(), s * s, "mat_c entry count");
    let mut m = Mat::zeros(s, s);
    for j in 0..s {
        for i in 0..s {
            m.data[i * s + j] = vv.data[i + j * s];
        }
    }
    Arr::M(m)
}

/// Column-major flatten, the inverse of [`mat_c`].
pub(crate) fn vec_c(m: &Arr) -> Arr {
    let mm = m.as_mat();
    assert_eq!(mm.rows, mm.cols, "vec_c expects square");
    let s = mm.rows;
    let mut v = vec![0.0; s * s];
    for j in 0..s {
        for i in 0..s {
            v[i + j * s] = mm.data[i * s + j];
        }
    }
    Arr::V(VecD::from(v))
}

pub(crate) const SPECTRAL_SCALE_TINY: f64 = 1e-12;

/// K̄ = (1 - margin) * K / max(lambda_max(K), tiny) for symmetric PSD K.
///
/// Returns the scaled matrix together with the converged top eigenvalue and
/// eigenvector (the eigenvector drives the backward pass).
pub(crate) fn spectral_scale(k: &Arr, margin: f64) -> (Arr, f64, VecD) {
    let km = k.as_mat();
    let (sigma, v) = numerics::power_iteration_sym(km, 2000, 1e-15);
    let denom = sigma.max(SPECTRAL_SCALE_TINY);
    let out = Arr::M(km.scale((1.0 - margin) / denom));
    (out, sigma, v)
}

/// Numerically-stable log-sum-exp of a logit vector.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

/// Cross entropy of one position plus its logit gradient (softmax - onehot).
pub(crate) fn ce_position(logits: &VecD, target: usize) -> (f64, VecD) {
    let lse = log_sum_exp(&logits.data);
    let loss = lse - logits.data[target];
    let mut g = VecD::zeros(logits.dim());
    for (gi, &z) in g.data.iter_mut().zip(logits.data.iter()) {
        *gi = (z - lse).exp();
    }
    g.data[target] -= 1.0;
    (loss, g)
}
