//! Gated diagonal linear recurrence over time.
//!
//! h_t = λ_t ⊙ h_{t-1} + drive_t, evaluated either token by token or as a
//! log-depth tree over the associative combine
//! (a, b) ∘ (a', b') = (a ⊙ a', a' ⊙ b + b'). The tree shape is fixed
//! (padding to a power of two with identity elements), so results do not
//! depend on any worker count.

use std::sync::Arc;

use crate::autodiff::{Arr, Engine, Eval, MapKind};
use crate::mixers::{self, BoundMixerWeights, MixerSpec, MixerWeights};
use crate::numerics::{Mat, VecD};
use crate::{FpError, Result};

pub type StateSequence = Vec<VecD>;

/// Per-step gates λ_t, every entry strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct GateSequence {
    pub lambda: Vec<VecD>,
}

/// Per-step additive drive.
#[derive(Debug, Clone)]
pub struct DriveSequence {
    pub drive: Vec<VecD>,
}

/// Reference evaluation: the oracle the parallel path is checked against.
pub fn scan_sequential(g: &GateSequence, u: &DriveSequence, h0: &VecD) -> StateSequence {
    assert_eq!(g.lambda.len(), u.drive.len(), "scan length");
    let mut out = Vec::with_capacity(g.lambda.len());
    let mut h = h0.clone();
    for (lam, dr) in g.lambda.iter().zip(u.drive.iter()) {
        h = lam.hadamard(&h).add(dr);
        out.push(h.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Sequential,
    Parallel,
}

/// Engine-generic scan from h0 = 0 (fold a nonzero h0 into the first drive).
///
/// `Parallel` runs a two-pass (up-sweep/down-sweep) tree over the combine,
/// padded to a power of two with the identity element (gate 1, drive 0).
pub fn scan_engine<E: Engine>(
    e: &mut E,
    gates: &[E::T],
    drives: &[E::T],
    mode: ScanMode,
) -> Vec<E::T> {
    assert_eq!(gates.len(), drives.len(), "scan length");
    let t_len = gates.len();
    if t_len == 0 {
        return Vec::new();
    }
    match mode {
        ScanMode::Sequential => {
            let mut out = Vec::with_capacity(t_len);
            let mut h = drives[0].clone();
            out.push(h.clone());
            for t in 1..t_len {
                let carried = e.hadamard(&gates[t], &h);
                h = e.add(&carried, &drives[t]);
                out.push(h.clone());
            }
            out
        }
        ScanMode::Parallel => {
            let n = t_len.next_power_of_two();
            let shape = e.val(&gates[0]);
            let ones = e.lift({
                let mut a = shape.zeros_like();
                for v in a.data_mut() {
                    *v = 1.0;
                }
                a
            });
            let zeros = e.lift(shape.zeros_like());
            let mut elems: Vec<(E::T, E::T)> = (0..n)
                .map(|i| {
                    if i < t_len {
                        (gates[i].clone(), drives[i].clone())
                    } else {
                        (ones.clone(), zeros.clone())
                    }
                })
                .collect();
            let combine = |e: &mut E, a: &(E::T, E::T), b: &(E::T, E::T)| -> (E::T, E::T) {
                let gate = e.hadamard(&a.0, &b.0);
                let carried = e.hadamard(&b.0, &a.1);
                let drive = e.add(&carried, &b.1);
                (gate, drive)
            };
            // Up-sweep.
            let mut stride = 1;
            while stride < n {
                let mut i = 2 * stride - 1;
                while i < n {
                    elems[i] = combine(e, &elems[i - stride], &elems[i]);
                    i += 2 * stride;
                }
                stride *= 2;
            }
            // Down-sweep for the exclusive prefix. The incoming prefix
            // covers everything before the subtree, so it combines on the
            // left of the stored left-subtree sum.
            let originals: Vec<(E::T, E::T)> = (0..t_len)
                .map(|i| (gates[i].clone(), drives[i].clone()))
                .collect();
            elems[n - 1] = (ones.clone(), zeros.clone());
            let mut stride = n / 2;
            while stride >= 1 {
                let mut i = 2 * stride - 1;
                while i < n {
                    let left_sum = elems[i - stride].clone();
                    let incoming = elems[i].clone();
                    elems[i - stride] = incoming.clone();
                    elems[i] = combine(e, &incoming, &left_sum);
                    i += 2 * stride;
                }
                stride /= 2;
            }
            // Inclusive = exclusive ∘ element; the drive part is the state.
            (0..t_len)
                .map(|i| combine(e, &elems[i], &originals[i]).1)
                .collect()
        }
    }
}

/// Log-depth evaluation; identical result to [`scan_sequential`].
pub fn scan_parallel(g: &GateSequence, u: &DriveSequence, h0: &VecD) -> StateSequence {
    assert_eq!(g.lambda.len(), u.drive.len(), "scan length");
    if g.lambda.is_empty() {
        return Vec::new();
    }
    let mut e = Eval;
    let gates: Vec<Arc<Arr>> = g.lambda.iter().map(|l| e.lift(Arr::V(l.clone()))).collect();
    let mut drives: Vec<Arc<Arr>> = u.drive.iter().map(|d| e.lift(Arr::V(d.clone()))).collect();
    // Fold h0 into the first drive.
    drives[0] = {
        let h0h = e.lift(Arr::V(h0.clone()));
        let carried = e.hadamard(&gates[0], &h0h);
        e.add(&carried, &drives[0])
    };
    scan_engine(&mut e, &gates, &drives, ScanMode::Parallel)
        .into_iter()
        .map(|h| h.as_vec().clone())
        .collect()
}

// ---------------------------------------------------------------------------
// One full fixed-point iteration of the vector-state model.
// ---------------------------------------------------------------------------

/// Learnable pieces of the gated diagonal vector-state recurrence.
#[derive(Debug, Clone)]
pub struct GatedDiagonalParams {
    pub d: usize,
    /// λ_t = sigmoid(W_λ x_t + b_λ).
    pub w_lambda: Mat,
    pub b_lambda: VecD,
    /// Shared input map B.
    pub b_input: Mat,
    pub mixer_spec: MixerSpec,
    pub mixer: MixerWeights,
    /// Multiply the drive by (1 - λ_t); disabling selects the plain
    /// ungated iteration used by the explicit-oracle equivalence check.
    pub input_gate: bool,
    /// Feed x_t + h_{t-1} from the previous iteration into the mixer
    /// coefficient maps (the mixer spec itself stays on the x-path, which
    /// keeps the x- and h-Jacobians of the coefficients equal).
    pub hidden_dependence: bool,
    /// Fixed per-token coefficients for input-independent configurations;
    /// used by the explicit-oracle differential tests.
    pub coefficient_override: Option<crate::mixers::MixerCoefficients>,
    pub scan_mode: ScanMode,
}

pub struct BoundGatedDiagonal<T> {
    pub w_lambda: T,
    pub b_lambda: T,
    pub b_input: T,
    pub mixer: BoundMixerWeights<T>,
}

impl GatedDiagonalParams {
    pub fn bind<E: Engine>(&self, e: &mut E) -> BoundGatedDiagonal<E::T> {
        BoundGatedDiagonal {
            w_lambda: e.lift(Arr::M(self.w_lambda.clone())),
            b_lambda: e.lift(Arr::V(self.b_lambda.clone())),
            b_input: e.lift(Arr::M(self.b_input.clone())),
            mixer: self.mixer.bind(e),
        }
    }
}

/// One full iteration: per-token gates and mixer coefficients, then the
/// drive (1 - λ_t) ⊙ (Q_t B x_t + (I - Q_t) h_t^prev), then a scan.
pub fn fp_iteration_step<E: Engine>(
    e: &mut E,
    p: &GatedDiagonalParams,
    bp: &BoundGatedDiagonal<E::T>,
    x: &[E::T],
    h_prev: &[E::T],
) -> Vec<E::T> {
    debug_assert_eq!(x.len(), h_prev.len());
    let t_len = x.len();
    let mut gates = Vec::with_capacity(t_len);
    let mut drives = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let pre = e.matvec(&bp.w_lambda, &x[t]);
        let pre = e.add(&pre, &bp.b_lambda);
        let lambda = e.map(MapKind::Sigmoid, &pre);

        let coef = match &p.coefficient_override {
            Some(fixed) => fixed.bind(e),
            None => {
                let coef_in = if p.hidden_dependence && t > 0 {
                    e.add(&x[t], &h_prev[t - 1])
                } else {
                    x[t].clone()
                };
                mixers::coefficients(e, &p.mixer_spec, &bp.mixer, &coef_in, None)
            }
        };

        let bx = e.matvec(&bp.b_input, &x[t]);
        let qbx = mixers::apply_q(e, &coef, &bx);
        let carried = mixers::apply_i_minus_q(e, &coef, &h_prev[t]);
        let inner = e.add(&qbx, &carried);
        let drive = if p.input_gate {
            let one_minus = e.map(MapKind::OneMinus, &lambda);
            e.hadamard(&one_minus, &inner)
        } else {
            inner
        };
        gates.push(lambda);
        drives.push(drive);
    }
    scan_engine(e, &gates, &drives, p.scan_mode)
}

/// Array-level wrapper with shape validation.
pub fn fp_iteration_step_plain(
    p: &GatedDiagonalParams,
    x: &[VecD],
    h_prev: &[VecD],
) -> Result<StateSequence> {
    if x.len() != h_prev.len() {
        return Err(FpError::shape(
            "fp_iteration_step",
            format!("{} tokens", x.len()),
            format!("{} previous-iterate tokens", h_prev.len()),
        ));
    }
    for (t, (xv, hv)) in x.iter().zip(h_prev.iter()).enumerate() {
        if xv.dim() != p.d || hv.dim() != p.d {
            return Err(FpError::shape(
                "fp_iteration_step",
                format!("dim {}", p.d),
                format!("token {t}: x {} h {}", xv.dim(), hv.dim()),
            ));
        }
        if !xv.is_finite() {
            return Err(FpError::NonFinite {
                context: format!("fp_iteration_step input token {t}"),
            });
        }
    }
    let mut e = Eval;
    let bound = p.bind(&mut e);
    let xs: Vec<Arc<Arr>> = x.iter().map(|v| e.lift(Arr::V(v.clone()))).collect();
    let hs: Vec<Arc<Arr>> = h_prev.iter().map(|v| e.lift(Arr::V(v.clone()))).collect();
    Ok(fp_iteration_step(&mut e, p, &bound, &xs, &hs)
        .into_iter()
        .map(|h| h.as_vec().clone())
        .collect())
}
