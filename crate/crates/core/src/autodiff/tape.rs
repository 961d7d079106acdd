//! The recording engine and its reverse pass.

use std::sync::Arc;

use super::engine::Engine;
use super::kernels::{self, MapKind};
use super::value::Arr;
use crate::numerics::{Mat, VecD};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    SMul(Var, Var),
    Dot(Var, Var),
    Scale(Var, f64),
    Map(MapKind, Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    Outer(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    RowScale(Var, Var),
    Row(Var, usize),
    L2Norm {
        a: Var,
        eps: f64,
    },
    LowerTri {
        v: Var,
        s: usize,
    },
    MatC {
        v: Var,
        s: usize,
    },
    VecC(Var),
    /// Spectral rescale of a symmetric PSD matrix; the top eigenpair found
    /// at record time drives the backward pass.
    SpectralScale {
        k: Var,
        margin: f64,
        sigma: f64,
        eigvec: VecD,
    },
    /// Summed token-level cross entropy over a set of positions, times
    /// `scale`. Per-position logit gradients are precomputed at record time.
    CrossEntropySum {
        logits: Vec<Var>,
        grads: Vec<VecD>,
        scale: f64,
    },
}

struct Node {
    value: Arc<Arr>,
    op: Op,
}

/// Append-only record of operations with saved forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> Arc<Arr> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Summed cross entropy over supervised positions, times `scale`.
    /// `positions` pairs a recorded logit vector with its target class.
    pub fn cross_entropy_sum(&mut self, positions: &[(Var, usize)], scale: f64) -> Var {
        assert!(!positions.is_empty(), "cross_entropy_sum needs positions");
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(positions.len());
        let mut logits = Vec::with_capacity(positions.len());
        for &(lv, target) in positions {
            let value = self.value(lv);
            let (loss, g) = kernels::ce_position(value.as_vec(), target);
            total += loss;
            grads.push(g);
            logits.push(lv);
        }
        self.push(
            Arr::scalar(total * scale),
            Op::CrossEntropySum { logits, grads, scale },
        )
    }

    /// Reverse pass from scalar `loss` (seed gradient 1). Returns one
    /// gradient slot per node; untouched nodes stay `None`.
    pub fn backward_scalar(&self, loss: Var) -> Vec<Option<Arr>> {
        self.backward_seeded(&[(loss, Arr::scalar(1.0))])
    }

    /// Reverse pass with explicit upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Arr)]) -> Vec<Option<Arr>> {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            debug_assert!(self.nodes[var.0].value.same_shape(g), "seed shape");
            match &mut grads[var.0] {
                Some(acc) => acc.add_in_place(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.reverse_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<Arr>], v: Var, delta: Arr) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn reverse_node(&self, idx: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let val = |v: Var| -> &Arr { &self.nodes[v.0].value };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, kernels::scale(g, -1.0));
            }
            Op::Hadamard(a, b) => {
                self.accum(grads, *a, kernels::hadamard(g, val(*b)));
                self.accum(grads, *b, kernels::hadamard(g, val(*a)));
            }
            Op::SMul(s, a) => {
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data().iter())
                    .map(|(x, y)| x * y)
                    .sum();
                self.accum(grads, *s, Arr::scalar(ds));
                self.accum(grads, *a, kernels::smul(val(*s), g));
            }
            Op::Dot(a, b) => {
                let g0 = g.as_scalar();
                self.accum(grads, *a, kernels::scale(val(*b), g0));
                self.accum(grads, *b, kernels::scale(val(*a), g0));
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, kernels::scale(g, *c));
            }
            Op::Map(kind, a) => {
                let input = val(*a);
                let output = &self.nodes[idx].value;
                let mut da = g.clone();
                for ((dv, &x), &y) in da
                    .data_mut()
                    .iter_mut()
                    .zip(input.data().iter())
                    .zip(output.data().iter())
                {
                    *dv *= kernels::map_derivative(*kind, x, y);
                }
                self.accum(grads, *a, da);
            }
            Op::MatVec(m, v) => {
                // y = M v: dM += g ⊗ v, dv += Mᵀ g
                self.accum(grads, *m, kernels::outer(g, val(*v)));
                self.accum(grads, *v, kernels::matvec_t(val(*m), g));
            }
            Op::MatVecT(m, v) => {
                // y = Mᵀ v: dM += v ⊗ g, dv += M g
                self.accum(grads, *m, kernels::outer(val(*v), g));
                self.accum(grads, *v, kernels::matvec(val(*m), g));
            }
            Op::Outer(u, v) => {
                // Y = u vᵀ: du += G v, dv += Gᵀ u
                self.accum(grads, *u, kernels::matvec(g, val(*v)));
                self.accum(grads, *v, kernels::matvec_t(g, val(*u)));
            }
            Op::MatMul(a, b) => {
                // C = A B: dA += G Bᵀ, dB += Aᵀ G
                self.accum(grads, *a, kernels::matmul_nt(g, val(*b)));
                let at = Arr::M(val(*a).as_mat().transpose());
                self.accum(grads, *b, kernels::matmul(&at, g));
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA += G B, dB += Gᵀ A
                self.accum(grads, *a, kernels::matmul(g, val(*b)));
                let gt = Arr::M(g.as_mat().transpose());
                self.accum(grads, *b, kernels::matmul(&gt, val(*a)));
            }
            Op::RowScale(m, v) => {
                // out[s,j] = m[s,j] v[j]
                let mm = val(*m).as_mat();
                let vv = val(*v).as_vec();
                let gm = g.as_mat();
                let mut dm = Mat::zeros(mm.rows, mm.cols);
                let mut dv = VecD::zeros(vv.dim());
                for r in 0..mm.rows {
                    for c in 0..mm.cols {
                        let gg = gm.data[r * mm.cols + c];
                        dm.data[r * mm.cols + c] = gg * vv.data[c];
                        dv.data[c] += gg * mm.data[r * mm.cols + c];
                    }
                }
                self.accum(grads, *m, Arr::M(dm));
                self.accum(grads, *v, Arr::V(dv));
            }
            Op::Row(m, row_idx) => {
                let mm = val(*m).as_mat();
                let mut dm = Mat::zeros(mm.rows, mm.cols);
                dm.data[row_idx * mm.cols..(row_idx + 1) * mm.cols].copy_from_slice(g.data());
                self.accum(grads, *m, Arr::M(dm));
            }
            Op::L2Norm { a, eps } => {
                let input = val(*a).as_vec();
                let n = input.norm2();
                let gv = g.as_vec();
                let da = if n >= *eps {
                    let out = self.nodes[idx].value.as_vec();
                    let proj = out.dot(gv);
                    let mut d = gv.clone();
                    for (dv, &o) in d.data.iter_mut().zip(out.data.iter()) {
                        *dv = (*dv - o * proj) / n;
                    }
                    d
                } else {
                    gv.scale(1.0 / eps)
                };
                self.accum(grads, *a, Arr::V(da));
            }
            Op::LowerTri { v, s } => {
                let gm = g.as_mat();
                let mut dv = VecD::zeros(s * (s + 1) / 2);
                let mut k = 0;
                for i in 0..*s {
                    for j in 0..=i {
                        dv.data[k] = gm.data[i * s + j];
                        k += 1;
                    }
                }
                self.accum(grads, *v, Arr::V(dv));
            }
            Op::MatC { v, s } => {
                let gm = g.as_mat();
                let mut dv = VecD::zeros(s * s);
                for j in 0..*s {
                    for i in 0..*s {
                        dv.data[i + j * s] = gm.data[i * s + j];
                    }
                }
                self.accum(grads, *v, Arr::V(dv));
            }
            Op::VecC(m) => {
                let s = val(*m).as_mat().rows;
                let gv = g.as_vec();
                let mut dm = Mat::zeros(s, s);
                for j in 0..s {
                    for i in 0..s {
                        dm.data[i * s + j] = gv.data[i + j * s];
                    }
                }
                self.accum(grads, *m, Arr::M(dm));
            }
            Op::SpectralScale {
                k,
                margin,
                sigma,
                eigvec,
            } => {
                // out = c·K/m with c = 1-margin, m = max(sigma, tiny).
                // dsigma/dK = v vᵀ for the unit top eigenvector v, so
                // dK = (c/m)·G - (c/m²)·<G, K>_F · v vᵀ   (when sigma > tiny).
                let c = 1.0 - margin;
                let m = sigma.max(kernels::SPECTRAL_SCALE_TINY);
                let gm = g.as_mat();
                let km = val(*k).as_mat();
                let mut dk = gm.scale(c / m);
                if *sigma > kernels::SPECTRAL_SCALE_TINY {
                    let gk: f64 = gm.data.iter().zip(km.data.iter()).map(|(a, b)| a * b).sum();
                    let coeff = c / (m * m) * gk;
                    let n = eigvec.dim();
                    for i in 0..n {
                        for j in 0..n {
                            dk.data[i * n + j] -= coeff * eigvec.data[i] * eigvec.data[j];
                        }
                    }
                }
                self.accum(grads, *k, Arr::M(dk));
            }
            Op::CrossEntropySum { logits, grads: pg, scale } => {
                let g0 = g.as_scalar() * scale;
                for (lv, lg) in logits.iter().zip(pg.iter()) {
                    self.accum(grads, *lv, Arr::V(lg.scale(g0)));
                }
            }
        }
    }
}

impl Engine for Tape {
    type T = Var;

    fn lift(&mut self, a: Arr) -> Var {
        self.push(a, Op::Leaf)
    }
    fn val(&self, t: &Var) -> Arc<Arr> {
        self.value(*t)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::add(&self.value(*a), &self.value(*b));
        self.push(v, Op::Add(*a, *b))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::sub(&self.value(*a), &self.value(*b));
        self.push(v, Op::Sub(*a, *b))
    }
    fn hadamard(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::hadamard(&self.value(*a), &self.value(*b));
        self.push(v, Op::Hadamard(*a, *b))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = kernels::scale(&self.value(*a), c);
        self.push(v, Op::Scale(*a, c))
    }
    fn smul(&mut self, s: &Var, a: &Var) -> Var {
        let v = kernels::smul(&self.value(*s), &self.value(*a));
        self.push(v, Op::SMul(*s, *a))
    }
    fn dot(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::dot(&self.value(*a), &self.value(*b));
        self.push(v, Op::Dot(*a, *b))
    }
    fn map(&mut self, kind: MapKind, a: &Var) -> Var {
        let v = kernels::map(kind, &self.value(*a));
        self.push(v, Op::Map(kind, *a))
    }
    fn matvec(&mut self, m: &Var, v: &Var) -> Var {
        let out = kernels::matvec(&self.value(*m), &self.value(*v));
        self.push(out, Op::MatVec(*m, *v))
    }
    fn matvec_t(&mut self, m: &Var, v: &Var) -> Var {
        let out = kernels::matvec_t(&self.value(*m), &self.value(*v));
        self.push(out, Op::MatVecT(*m, *v))
    }
    fn outer(&mut self, u: &Var, v: &Var) -> Var {
        let out = kernels::outer(&self.value(*u), &self.value(*v));
        self.push(out, Op::Outer(*u, *v))
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let out = kernels::matmul(&self.value(*a), &self.value(*b));
        self.push(out, Op::MatMul(*a, *b))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Var {
        let out = kernels::matmul_nt(&self.value(*a), &self.value(*b));
        self.push(out, Op::MatMulNT(*a, *b))
    }
    fn row_scale(&mut self, m: &Var, v: &Var) -> Var {
        let out = kernels::row_scale(&self.value(*m), &self.value(*v));
        self.push(out, Op::RowScale(*m, *v))
    }
    fn row(&mut self, m: &Var, idx: usize) -> Var {
        let out = kernels::row(&self.value(*m), idx);
        self.push(out, Op::Row(*m, idx))
    }
    fn l2_normalize(&mut self, a: &Var, eps: f64) -> Var {
        let out = kernels::l2_normalize(&self.value(*a), eps);
        self.push(out, Op::L2Norm { a: *a, eps })
    }
    fn lower_tri(&mut self, v: &Var, s: usize) -> Var {
        let out = kernels::lower_tri(&self.value(*v), s);
        self.push(out, Op::LowerTri { v: *v, s })
    }
    fn mat_c(&mut self, v: &Var, s: usize) -> Var {
        let out = kernels::mat_c(&self.value(*v), s);
        self.push(out, Op::MatC { v: *v, s })
    }
    fn vec_c(&mut self, m: &Var) -> Var {
        let out = kernels::vec_c(&self.value(*m));
        self.push(out, Op::VecC(*m))
    }
    fn spectral_scale(&mut self, k: &Var, margin: f64) -> Var {
        let (out, sigma, eigvec) = kernels::spectral_scale(&self.value(*k), margin);
        self.push(
            out,
            Op::SpectralScale {
                k: *k,
                margin,
                sigma,
                eigvec,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gradient check for every primitive through a scalar readout.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = 3usize;
        let nv = s * (s + 1) / 2;

        // Inputs: a vector of nv entries feeding a chain that exercises all ops.
        let x0: Vec<f64> = (0..nv).map(|_| rng.random::<f64>() * 1.6 - 0.8).collect();
        let w: Vec<f64> = (0..nv * nv).map(|_| rng.random::<f64>() * 1.0 - 0.5).collect();
        let vconst = [0.3, -0.4, 0.8];

        // One chain definition used for both the value probe and the
        // analytic gradient; everything but `x` enters as constants.
        let build = |t: &mut Tape, xs: &[f64]| -> (Var, Var) {
            let x = t.lift(Arr::vec(xs.to_vec()));
            let wm = t.lift(Arr::M(Mat {
                rows: nv,
                cols: nv,
                data: w.clone(),
            }));
            let mv = t.matvec(&wm, &x);
            let sp = t.map(MapKind::Softplus, &mv);
            let sl = t.map(MapKind::Silu, &sp);
            let sg = t.map(MapKind::Sigmoid, &x);
            let had = t.hadamard(&sl, &sg);
            let nrm = t.l2_normalize(&had, 1e-9);
            let tri = t.lower_tri(&nrm, s);
            let psd = t.matmul_nt(&tri, &tri);
            let scaled = t.spectral_scale(&psd, 0.01);
            let flat = t.vec_c(&scaled);
            let back = t.mat_c(&flat, s);
            let ev = t.map(MapKind::Exp, &x);
            let vshort = t.lift(Arr::vec(vconst.to_vec()));
            let rs = t.row_scale(&back, &vshort);
            let r0 = t.row(&rs, 1);
            let mvt = t.matvec_t(&back, &r0);
            let om = t.map(MapKind::OneMinus, &mvt);
            let ng = t.map(MapKind::Neg, &om);
            let d1 = t.dot(&ng, &r0);
            let d2 = t.dot(&r0, &r0);
            let sc = t.smul(&d2, &ev);
            let sc2 = t.scale(&sc, 0.25);
            let a1 = t.add(&sc2, &x);
            let outer = t.outer(&ng, &r0);
            let mm = t.matmul(&outer, &back);
            let r2 = t.row(&mm, 0);
            let d4 = t.dot(&r2, &r0);
            let s1 = t.sub(&a1, &x);
            let d3 = t.dot(&s1, &ev);
            let dsum = t.add(&d1, &d3);
            let dsum = t.add(&dsum, &d4);
            (x, dsum)
        };

        let run = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let (_, out) = build(&mut t, xs);
            t.value(out).as_scalar()
        };
        let analytic = {
            let mut t = Tape::new();
            let (x, out) = build(&mut t, &x0);
            let grads = t.backward_scalar(out);
            grads[x.0].clone().unwrap().data().to_vec()
        };

        let numeric = central_grad(&mut |xs| run(xs), &x0, 1e-6);
        for i in 0..nv {
            let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-4);
            assert!(
                (analytic[i] - numeric[i]).abs() / denom < 1e-5,
                "grad[{i}]: analytic {} vs numeric {}",
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 3usize;
        let v = 5usize;
        let logits0: Vec<f64> = (0..t_len * v).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let targets = [1usize, 4, 0];

        let run = |flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let mut positions = Vec::new();
            for p in 0..t_len {
                let lv = t.lift(Arr::vec(flat[p * v..(p + 1) * v].to_vec()));
                positions.push((lv, targets[p]));
            }
            let loss = t.cross_entropy_sum(&positions, 1.0 / t_len as f64);
            t.value(loss).as_scalar()
        };

        let analytic = {
            let mut t = Tape::new();
            let mut positions = Vec::new();
            let mut vars = Vec::new();
            for p in 0..t_len {
                let lv = t.lift(Arr::vec(logits0[p * v..(p + 1) * v].to_vec()));
                positions.push((lv, targets[p]));
                vars.push(lv);
            }
            let loss = t.cross_entropy_sum(&positions, 1.0 / t_len as f64);
            let grads = t.backward_scalar(loss);
            let mut flat = Vec::new();
            for var in vars {
                flat.extend_from_slice(grads[var.0].as_ref().unwrap().data());
            }
            flat
        };

        let numeric = central_grad(&mut |f| run(f), &logits0, 1e-6);
        for i in 0..t_len * v {
            assert!(
                (analytic[i] - numeric[i]).abs() < 1e-8,
                "ce grad[{i}]: {} vs {}",
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.lift(Arr::vec(vec![1.0, 2.0]));
        let y = t.map(MapKind::Silu, &x);
        let grads = t.backward_seeded(&[(y, Arr::zeros_vec(2))]);
        let gx = grads[x.0].as_ref().unwrap();
        assert!(gx.data().iter().all(|&g| g == 0.0));
    }
}
