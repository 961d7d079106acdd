//! Array value: a vector or a row-major matrix, the unit of tape storage.

use crate::numerics::{Mat, VecD};

#[derive(Debug, Clone, PartialEq)]
pub enum Arr {
    V(VecD),
    M(Mat),
}

impl Arr {
    pub fn scalar(x: f64) -> Arr {
        Arr::V(VecD::from(vec![x]))
    }

    pub fn vec(data: Vec<f64>) -> Arr {
        Arr::V(VecD::from(data))
    }

    pub fn zeros_vec(dim: usize) -> Arr {
        Arr::V(VecD::zeros(dim))
    }

    pub fn zeros_like(&self) -> Arr {
        match self {
            Arr::V(v) => Arr::V(VecD::zeros(v.dim())),
            Arr::M(m) => Arr::M(Mat::zeros(m.rows, m.cols)),
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Arr::V(v) => &v.data,
            Arr::M(m) => &m.data,
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Arr::V(v) => &mut v.data,
            Arr::M(m) => &mut m.data,
        }
    }

    pub fn as_vec(&self) -> &VecD {
        match self {
            Arr::V(v) => v,
            Arr::M(_) => panic!("expected vector, got matrix"),
        }
    }

    pub fn as_mat(&self) -> &Mat {
        match self {
            Arr::M(m) => m,
            Arr::V(_) => panic!("expected matrix, got vector"),
        }
    }

    pub fn as_scalar(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "expected scalar");
        d[0]
    }

    pub fn shape_str(&self) -> String {
        match self {
            Arr::V(v) => format!("vec[{}]", v.dim()),
            Arr::M(m) => format!("mat[{}x{}]", m.rows, m.cols),
        }
    }

    pub fn same_shape(&self, other: &Arr) -> bool {
        match (self, other) {
            (Arr::V(a), Arr::V(b)) => a.dim() == b.dim(),
            (Arr::M(a), Arr::M(b)) => a.rows == b.rows && a.cols == b.cols,
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn norm_inf(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Accumulate `other` into `self` (shapes must match).
    pub fn add_in_place(&mut self, other: &Arr) {
        debug_assert!(self.same_shape(other), "grad shape mismatch");
        for (a, b) in self.data_mut().iter_mut().zip(other.data().iter()) {
            *a += b;
        }
    }
}
