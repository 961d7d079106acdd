//! Minimal dense linear algebra and activation kernels.
//!
//! Everything downstream builds on these: matrices are row-major `f64`
//! buffers, vectors are flat `f64` buffers. No external numerical
//! dependency; 64-bit floats throughout (32-bit appears only as a
//! checkpoint storage format).

use crate::{FpError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VecD {
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// y = M x
    pub fn matvec(&self, x: &VecD) -> VecD {
        assert_eq!(self.cols, x.dim(), "matvec shape");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.data.iter()) {
                acc += a * b;
            }
            y[i] = acc;
        }
        VecD { data: y }
    }

    /// y = Mᵀ x
    pub fn matvec_t(&self, x: &VecD) -> VecD {
        assert_eq!(self.rows, x.dim(), "matvec_t shape");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x.data[i];
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (yj, a) in y.iter_mut().zip(row.iter()) {
                *yj += a * xi;
            }
        }
        VecD { data: y }
    }

    /// C = A B
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul shape");
        let mut c = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
                for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += a * bv;
                }
            }
        }
        c
    }

    /// C = A Bᵀ
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt shape");
        let mut c = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                let arow = &self.data[i * self.cols..(i + 1) * self.cols];
                let brow = &b.data[j * b.cols..(j + 1) * b.cols];
                let mut acc = 0.0;
                for (a, bv) in arow.iter().zip(brow.iter()) {
                    acc += a * bv;
                }
                c.data[i * b.rows + j] = acc;
            }
        }
        c
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols), "add shape");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(b.data.iter()).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols), "sub shape");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(b.data.iter()).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    /// Solve M x = b by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &VecD) -> Result<VecD> {
        if self.rows != self.cols || self.rows != b.dim() {
            return Err(FpError::shape(
                "solve",
                format!("square n x n with b of dim n"),
                format!("{}x{} with b of dim {}", self.rows, self.cols, b.dim()),
            ));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.data.clone();
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < 1e-300 {
                return Err(FpError::Singular {
                    context: "gaussian elimination".into(),
                });
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                x.swap(col, piv);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                x[r] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut acc = x[col];
            for j in col + 1..n {
                acc -= a[col * n + j] * x[j];
            }
            x[col] = acc / a[col * n + col];
        }
        Ok(VecD { data: x })
    }

    /// Inverse via column-wise solves.
    pub fn inverse(&self) -> Result<Mat> {
        let n = self.rows;
        if self.rows != self.cols {
            return Err(FpError::shape(
                "inverse",
                "square".to_string(),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        let mut inv = Mat::zeros(n, n);
        for j in 0..n {
            let mut e = VecD::zeros(n);
            e.data[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv.data[i * n + j] = col.data[i];
            }
        }
        Ok(inv)
    }
}

impl VecD {
    pub fn zeros(dim: usize) -> Self {
        VecD { data: vec![0.0; dim] }
    }

    pub fn from(data: Vec<f64>) -> Self {
        VecD { data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &VecD) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot shape");
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &VecD) -> VecD {
        assert_eq!(self.dim(), other.dim(), "add shape");
        VecD {
            data: self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &VecD) -> VecD {
        assert_eq!(self.dim(), other.dim(), "sub shape");
        VecD {
            data: self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> VecD {
        VecD {
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    pub fn hadamard(&self, other: &VecD) -> VecD {
        assert_eq!(self.dim(), other.dim(), "hadamard shape");
        VecD {
            data: self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect(),
        }
    }

    /// Outer product a bᵀ.
    pub fn outer(&self, other: &VecD) -> Mat {
        let mut m = Mat::zeros(self.dim(), other.dim());
        for i in 0..self.dim() {
            for j in 0..other.dim() {
                m.data[i * other.dim() + j] = self.data[i] * other.data[j];
            }
        }
        m
    }
}

/// Default number of power iterations for [`spectral_norm`].
pub const SPECTRAL_NORM_ITERS: usize = 50;

/// Largest-singular-value estimate by power iteration on MᵀM.
///
/// The start vector is drawn from a seeded generator so results are
/// deterministic across runs. The estimate is nondecreasing in `iters`
/// and converges to ‖M‖₂.
pub fn spectral_norm(m: &Mat, iters: usize, seed: u64) -> Result<f64> {
    assert!(iters >= 1, "spectral_norm requires iters >= 1");
    if !m.is_finite() {
        return Err(FpError::NonFinite {
            context: "spectral_norm input".into(),
        });
    }
    if m.rows == 0 || m.cols == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = VecD {
        data: (0..m.cols).map(|_| rng.random::<f64>() - 0.5).collect(),
    };
    for _ in 0..iters {
        let mv = m.matvec(&v);
        let w = m.matvec_t(&mv);
        let n = w.norm2();
        if n < 1e-300 {
            return Ok(0.0);
        }
        v = w.scale(1.0 / n);
    }
    // sigma from the final iterate (normalized above).
    Ok(m.matvec(&v).norm2())
}

/// Largest eigenvalue and eigenvector of a symmetric PSD matrix by power
/// iteration, run to convergence of the Rayleigh quotient.
///
/// Returns `(lambda_max, eigvec)`. Used by the Kronecker mixer
/// normalization, where the eigenvector also drives the backward pass.
pub fn power_iteration_sym(k: &Mat, max_iters: usize, tol: f64) -> (f64, VecD) {
    let n = k.rows;
    debug_assert_eq!(k.rows, k.cols);
    // Fixed deterministic start; strictly positive entries so a nonnegative
    // dominant eigenvector (PSD from LLᵀ) is never missed.
    let mut v = VecD {
        data: (0..n).map(|i| 1.0 + 0.01 * (i as f64 + 1.0)).collect(),
    };
    let nv = v.norm2();
    v = v.scale(1.0 / nv);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let kv = k.matvec(&v);
        let norm = kv.norm2();
        if norm < 1e-300 {
            return (0.0, VecD::zeros(n));
        }
        let vnew = kv.scale(1.0 / norm);
        let new_lambda = vnew.dot(&k.matvec(&vnew));
        let done = (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1.0);
        v = vnew;
        lambda = new_lambda;
        if done {
            break;
        }
    }
    (lambda, v)
}

/// v / max(‖v‖₂, eps). Output norm ≤ 1, and exactly 1 whenever ‖v‖₂ ≥ eps.
pub fn l2_normalize(v: &VecD, eps: f64) -> VecD {
    assert!(eps > 0.0, "l2_normalize requires eps > 0");
    let n = v.norm2();
    v.scale(1.0 / n.max(eps))
}

/// Supported elementwise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Sigmoid,
    Silu,
    Exp,
}

/// Threshold above which softplus(z) is computed as z itself.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > SOFTPLUS_LINEAR_THRESHOLD {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// Elementwise activation over a vector.
pub fn activations(kind: Activation, v: &VecD) -> VecD {
    let f: fn(f64) -> f64 = match kind {
        Activation::Softplus => softplus,
        Activation::Sigmoid => sigmoid,
        Activation::Silu => silu,
        Activation::Exp => f64::exp,
    };
    VecD {
        data: v.data.iter().map(|&z| f(z)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        }
    }

    #[test]
    fn spectral_norm_identity() {
        let m = Mat::identity(3);
        let s = spectral_norm(&m, SPECTRAL_NORM_ITERS, 0).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn spectral_norm_diagonal() {
        let m = Mat::diag(&[2.0, 1.0]);
        let s = spectral_norm(&m, SPECTRAL_NORM_ITERS, 0).unwrap();
        assert!((s - 2.0).abs() < 1e-9, "got {s}");
    }

    /// Brute-force largest |eigenvalue| of a symmetric matrix via Jacobi
    /// rotations; independent of the power-iteration path.
    fn jacobi_max_abs_eig(m: &Mat) -> f64 {
        let n = m.rows;
        let mut a = m.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a.get(i, j).abs();
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn spectral_norm_matches_eigen_oracle_on_symmetric() {
        for seed in 0..20u64 {
            let raw = random_mat(4, 4, seed);
            let sym = raw.add(&raw.transpose()).scale(0.5);
            let expect = jacobi_max_abs_eig(&sym);
            // Enough iterations to push past small spectral gaps.
            let got = spectral_norm(&sym, 5000, seed + 1).unwrap();
            assert!(
                (got - expect).abs() < 1e-8 * expect.max(1.0),
                "seed {seed}: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn spectral_norm_nondecreasing_in_iters() {
        let m = random_mat(5, 3, 7);
        let mut prev = 0.0;
        for iters in 1..30 {
            let s = spectral_norm(&m, iters, 42).unwrap();
            assert!(s >= prev - 1e-12, "iters {iters}: {s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn spectral_norm_rejects_non_finite() {
        let mut m = Mat::identity(2);
        m.data[1] = f64::NAN;
        assert!(spectral_norm(&m, 10, 0).is_err());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let v = VecD::from(vec![3.0, 4.0]);
        let n = l2_normalize(&v, 1e-8);
        assert!((n.data[0] - 0.6).abs() < 1e-15);
        assert!((n.data[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let v = VecD::zeros(4);
        let n = l2_normalize(&v, 1e-8);
        assert!(n.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = VecD::from((0..8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());
        let n = l2_normalize(&v, 1e-8);
        assert!((n.norm2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_closed_forms() {
        assert!((softplus(0.0) - 2.0_f64.ln()).abs() < 1e-12);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(silu(0.0) == 0.0);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn solve_and_inverse_roundtrip() {
        let m = random_mat(5, 5, 11);
        let b = VecD::from((0..5).map(|i| i as f64 - 2.0).collect());
        let x = m.solve(&b).unwrap();
        let back = m.matvec(&x);
        for i in 0..5 {
            assert!((back.data[i] - b.data[i]).abs() < 1e-10);
        }
        let inv = m.inverse().unwrap();
        let ident = m.matmul(&inv);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ident.get(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn spectral_norm_at_most_frobenius(seed in 0u64..500, r in 1usize..6, c in 1usize..6) {
            let m = random_mat(r, c, seed);
            let s = spectral_norm(&m, 100, seed).unwrap();
            prop_assert!(s <= m.frobenius_norm() + 1e-9);
        }

        #[test]
        fn l2_normalize_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = VecD::from((0..6).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect());
            prop_assume!(v.norm2() >= 1e-8);
            let once = l2_normalize(&v, 1e-8);
            let twice = l2_normalize(&once, 1e-8);
            for i in 0..6 {
                prop_assert!((once.data[i] - twice.data[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn activations_finite_in_range(z in -700.0f64..700.0) {
            let v = VecD::from(vec![z]);
            for kind in [Activation::Softplus, Activation::Sigmoid, Activation::Silu, Activation::Exp] {
                prop_assert!(activations(kind, &v).is_finite());
            }
        }
    }
}
