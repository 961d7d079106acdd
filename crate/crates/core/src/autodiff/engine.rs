//! The evaluation abstraction: one step-function implementation, two engines.

use std::sync::Arc;

use super::kernels::{self, MapKind};
use super::value::Arr;

/// Numeric context a step function runs under. [`Eval`] computes values
/// directly; [`super::Tape`] additionally records every operation so the
/// computation can be reversed.
pub trait Engine {
    type T: Clone;

    /// Introduce a constant (or, on a tape, a leaf).
    fn lift(&mut self, a: Arr) -> Self::T;
    /// Current value of a handle.
    fn val(&self, t: &Self::T) -> Arc<Arr>;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn hadamard(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, c: f64) -> Self::T;
    /// `s` holds a single element; broadcast multiply.
    fn smul(&mut self, s: &Self::T, a: &Self::T) -> Self::T;
    fn dot(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn map(&mut self, kind: MapKind, a: &Self::T) -> Self::T;
    fn matvec(&mut self, m: &Self::T, v: &Self::T) -> Self::T;
    fn matvec_t(&mut self, m: &Self::T, v: &Self::T) -> Self::T;
    fn outer(&mut self, u: &Self::T, v: &Self::T) -> Self::T;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn row_scale(&mut self, m: &Self::T, v: &Self::T) -> Self::T;
    fn row(&mut self, m: &Self::T, idx: usize) -> Self::T;
    fn l2_normalize(&mut self, a: &Self::T, eps: f64) -> Self::T;
    fn lower_tri(&mut self, v: &Self::T, s: usize) -> Self::T;
    fn mat_c(&mut self, v: &Self::T, s: usize) -> Self::T;
    fn vec_c(&mut self, m: &Self::T) -> Self::T;
    fn spectral_scale(&mut self, k: &Self::T, margin: f64) -> Self::T;
}

/// Plain evaluation: handles are shared array values, nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Engine for Eval {
    type T = Arc<Arr>;

    fn lift(&mut self, a: Arr) -> Arc<Arr> {
        Arc::new(a)
    }
    fn val(&self, t: &Arc<Arr>) -> Arc<Arr> {
        Arc::clone(t)
    }
    fn add(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::add(a, b))
    }
    fn sub(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::sub(a, b))
    }
    fn hadamard(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::hadamard(a, b))
    }
    fn scale(&mut self, a: &Arc<Arr>, c: f64) -> Arc<Arr> {
        Arc::new(kernels::scale(a, c))
    }
    fn smul(&mut self, s: &Arc<Arr>, a: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::smul(s, a))
    }
    fn dot(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::dot(a, b))
    }
    fn map(&mut self, kind: MapKind, a: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::map(kind, a))
    }
    fn matvec(&mut self, m: &Arc<Arr>, v: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::matvec(m, v))
    }
    fn matvec_t(&mut self, m: &Arc<Arr>, v: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::matvec_t(m, v))
    }
    fn outer(&mut self, u: &Arc<Arr>, v: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::outer(u, v))
    }
    fn matmul(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::matmul(a, b))
    }
    fn matmul_nt(&mut self, a: &Arc<Arr>, b: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::matmul_nt(a, b))
    }
    fn row_scale(&mut self, m: &Arc<Arr>, v: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::row_scale(m, v))
    }
    fn row(&mut self, m: &Arc<Arr>, idx: usize) -> Arc<Arr> {
        Arc::new(kernels::row(m, idx))
    }
    fn l2_normalize(&mut self, a: &Arc<Arr>, eps: f64) -> Arc<Arr> {
        Arc::new(kernels::l2_normalize(a, eps))
    }
    fn lower_tri(&mut self, v: &Arc<Arr>, s: usize) -> Arc<Arr> {
        Arc::new(kernels::lower_tri(v, s))
    }
    fn mat_c(&mut self, v: &Arc<Arr>, s: usize) -> Arc<Arr> {
        Arc::new(kernels::mat_c(v, s))
    }
    fn vec_c(&mut self, m: &Arc<Arr>) -> Arc<Arr> {
        Arc::new(kernels::vec_c(m))
    }
    fn spectral_scale(&mut self, k: &Arc<Arr>, margin: f64) -> Arc<Arr> {
        let (out, _sigma, _v) = kernels::spectral_scale(k, margin);
        Arc::new(out)
    }
}
