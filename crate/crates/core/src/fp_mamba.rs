//! Matrix-state selective layer iterated to a fixed point.
//!
//! Per token, a selective gate λ_t ∈ R^{d_state × d_inner} and normalized
//! key/query vectors b̄_t, c̄_t drive the matrix recurrence
//!
//!   H_t = λ_t ⊙ H_{t-1} + b̄_t (Δ_t ⊙ x̃_t)ᵀ,      y_tᵀ = c̄_tᵀ H_t,
//!
//! where x̃_t = Q_t (x_t - y_t^prev) + y_t^prev folds the channel mixer and
//! the previous iteration's output into an adjusted input. The selective
//! maps may additionally read the shifted output y_{t-1}^prev (previous
//! token, previous iteration). The iteration output is gated, L2-normalized
//! per token, and passed to the next iteration until the fixed-point solver
//! stops.

use std::sync::Arc;

use crate::autodiff::{Arr, Engine, Eval, MapKind};
use crate::fixed_point::{self, BatchStep, FixedPointConfig, FixedPointResult, SeqState};
use crate::mixers::{self, BoundMixerWeights, MixerSpec, MixerWeights};
use crate::numerics::{Mat, VecD};
use crate::scan::{scan_engine, ScanMode};
use crate::{FpError, Result};

/// Per-token output normalization floor.
pub const OUTPUT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FpMambaDims {
    pub d_model: usize,
    pub expansion: usize,
    pub d_state: usize,
}

impl FpMambaDims {
    pub fn d_inner(&self) -> usize {
        self.d_model * self.expansion
    }
}

/// All learnable arrays of one layer plus its structural switches.
#[derive(Debug, Clone)]
pub struct FpMambaParams {
    pub dims: FpMambaDims,
    /// λ_log = exp(ω), so λ_t = exp(-exp(ω) ⊙ row-broadcast Δ_t).
    pub omega: Mat, // d_state × d_inner
    pub w_delta: Mat, // d_inner × d_inner
    pub b_delta: VecD, // d_inner
    pub w_b_x: Mat, // d_state × d_inner
    pub w_b_y: Mat, // d_state × d_inner
    pub w_c_x: Mat, // d_state × d_inner
    pub w_c_y: Mat, // d_state × d_inner
    pub w_g: Mat,   // d_inner × d_inner
    pub d_skip: VecD, // d_inner
    pub in_proj: Mat, // d_inner × d_model
    pub out_proj: Mat, // d_model × d_inner
    pub mixer_spec: MixerSpec,
    pub mixer: MixerWeights,
    /// Shifted-output dependence of the key/query maps b, c.
    pub y_dep_bc: bool,
    /// Force Q = I (the diagonal-model limit used by baselines).
    pub identity_mixer: bool,
    /// Skip term D ⊙ x̃ on the adjusted input (default); off = D ⊙ x.
    pub skip_on_adjusted_input: bool,
    pub scan_mode: ScanMode,
}

pub struct BoundFpMamba<T> {
    pub omega: T,
    pub exp_omega: T,
    pub w_delta: T,
    pub b_delta: T,
    pub w_b_x: T,
    pub w_b_y: T,
    pub w_c_x: T,
    pub w_c_y: T,
    pub w_g: T,
    pub d_skip: T,
    pub in_proj: T,
    pub out_proj: T,
    pub mixer: BoundMixerWeights<T>,
}

impl FpMambaParams {
    pub fn validate(&self) -> Result<()> {
        let di = self.dims.d_inner();
        let ds = self.dims.d_state;
        let dm = self.dims.d_model;
        let ok = self.omega.rows == ds
            && self.omega.cols == di
            && self.w_delta.rows == di
            && self.w_delta.cols == di
            && self.b_delta.dim() == di
            && [&self.w_b_x, &self.w_b_y, &self.w_c_x, &self.w_c_y]
                .iter()
                .all(|m| m.rows == ds && m.cols == di)
            && self.w_g.rows == di
            && self.w_g.cols == di
            && self.d_skip.dim() == di
            && self.in_proj.rows == di
            && self.in_proj.cols == dm
            && self.out_proj.rows == dm
            && self.out_proj.cols == di;
        if !ok {
            return Err(FpError::InvalidConfig("inconsistent layer shapes".into()));
        }
        if !self.identity_mixer {
            self.mixer_spec.validate()?;
            self.mixer.check_shapes(&self.mixer_spec)?;
            if self.mixer_spec.d_inner != di {
                return Err(FpError::InvalidConfig(
                    "mixer d_inner differs from layer d_inner".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn bind<E: Engine>(&self, e: &mut E) -> BoundFpMamba<E::T> {
        let omega = e.lift(Arr::M(self.omega.clone()));
        let exp_omega = e.map(MapKind::Exp, &omega);
        BoundFpMamba {
            omega,
            exp_omega,
            w_delta: e.lift(Arr::M(self.w_delta.clone())),
            b_delta: e.lift(Arr::V(self.b_delta.clone())),
            w_b_x: e.lift(Arr::M(self.w_b_x.clone())),
            w_b_y: e.lift(Arr::M(self.w_b_y.clone())),
            w_c_x: e.lift(Arr::M(self.w_c_x.clone())),
            w_c_y: e.lift(Arr::M(self.w_c_y.clone())),
            w_g: e.lift(Arr::M(self.w_g.clone())),
            d_skip: e.lift(Arr::V(self.d_skip.clone())),
            in_proj: e.lift(Arr::M(self.in_proj.clone())),
            out_proj: e.lift(Arr::M(self.out_proj.clone())),
            mixer: self.mixer.bind(e),
        }
    }
}

/// Selective quantities for one token.
pub struct SelectiveParams<T> {
    pub lambda: T, // d_state × d_inner
    pub delta: T,  // d_inner
    pub b_bar: T,  // d_state
    pub c_bar: T,  // d_state
}

fn delta_of<E: Engine>(e: &mut E, bp: &BoundFpMamba<E::T>, x_t: &E::T) -> E::T {
    let pre = e.matvec(&bp.w_delta, x_t);
    let pre = e.add(&pre, &bp.b_delta);
    e.map(MapKind::Softplus, &pre)
}

fn lambda_of<E: Engine>(e: &mut E, bp: &BoundFpMamba<E::T>, delta_t: &E::T) -> E::T {
    let scaled = e.row_scale(&bp.exp_omega, delta_t);
    let neg = e.map(MapKind::Neg, &scaled);
    e.map(MapKind::Exp, &neg)
}

fn bc_bars<E: Engine>(
    e: &mut E,
    bp: &BoundFpMamba<E::T>,
    x_t: &E::T,
    y_shift: &E::T,
    y_dep: bool,
) -> (E::T, E::T) {
    let mut b = e.matvec(&bp.w_b_x, x_t);
    let mut c = e.matvec(&bp.w_c_x, x_t);
    if y_dep {
        let by = e.matvec(&bp.w_b_y, y_shift);
        b = e.add(&b, &by);
        let cy = e.matvec(&bp.w_c_y, y_shift);
        c = e.add(&c, &cy);
    }
    (
        e.l2_normalize(&b, OUTPUT_NORM_EPS),
        e.l2_normalize(&c, OUTPUT_NORM_EPS),
    )
}

/// Δ_t = softplus(W_Δ x + b_Δ); λ_t = exp(-exp(ω) Δ); b̄, c̄ normalized
/// selective vectors with optional shifted-output dependence.
pub fn selective_params<E: Engine>(
    e: &mut E,
    p: &FpMambaParams,
    bp: &BoundFpMamba<E::T>,
    x_t: &E::T,
    y_shift: &E::T,
) -> SelectiveParams<E::T> {
    let delta = delta_of(e, bp, x_t);
    let lambda = lambda_of(e, bp, &delta);
    let (b_bar, c_bar) = bc_bars(e, bp, x_t, y_shift, p.y_dep_bc);
    SelectiveParams {
        lambda,
        delta,
        b_bar,
        c_bar,
    }
}

/// x̃ = Q (x - y_prev) + y_prev, which equals Q x + (I - Q) y_prev.
/// The identity mixer collapses to x exactly.
pub fn adjusted_input<E: Engine>(
    e: &mut E,
    coef: &mixers::MixerCoef<E::T>,
    x_t: &E::T,
    y_prev_t: &E::T,
) -> E::T {
    if matches!(coef, mixers::MixerCoef::Identity) {
        return x_t.clone();
    }
    let diff = e.sub(x_t, y_prev_t);
    let q_diff = mixers::apply_q(e, coef, &diff);
    e.add(&q_diff, y_prev_t)
}

/// Input-only quantities reused across fixed-point iterations.
pub struct XCache<T> {
    pub delta: Vec<T>,
    pub lambda: Vec<T>,
    pub gate: Vec<T>,
    /// Coefficients precomputed when the mixer has no shifted-output path.
    pub coef: Option<Vec<mixers::MixerCoef<T>>>,
}

pub fn build_x_cache<E: Engine>(
    e: &mut E,
    p: &FpMambaParams,
    bp: &BoundFpMamba<E::T>,
    x: &[E::T],
) -> XCache<E::T> {
    let mut delta = Vec::with_capacity(x.len());
    let mut lambda = Vec::with_capacity(x.len());
    let mut gate = Vec::with_capacity(x.len());
    for x_t in x {
        let d = delta_of(e, bp, x_t);
        lambda.push(lambda_of(e, bp, &d));
        delta.push(d);
        let g_pre = e.matvec(&bp.w_g, x_t);
        gate.push(e.map(MapKind::Silu, &g_pre));
    }
    let coef = if p.identity_mixer {
        Some(x.iter().map(|_| mixers::MixerCoef::Identity).collect())
    } else if !p.mixer_spec.hidden_dependence {
        Some(
            x.iter()
                .map(|x_t| mixers::coefficients(e, &p.mixer_spec, &bp.mixer, x_t, None))
                .collect(),
        )
    } else {
        None
    };
    XCache {
        delta,
        lambda,
        gate,
        coef,
    }
}

pub struct StepOut<T> {
    pub y: Vec<T>,
    pub h_seq: Vec<T>,
}

/// One full iteration over the sequence: selective params and mixer
/// coefficients from (x_t, y_{t-1}^prev), adjusted input from y_t^prev, the
/// matrix-state scan, contraction with c̄_t, skip, gate, and per-token
/// normalization.
pub fn fp_mamba_step<E: Engine>(
    e: &mut E,
    p: &FpMambaParams,
    bp: &BoundFpMamba<E::T>,
    x: &[E::T],
    y_prev: &[E::T],
    cache: &XCache<E::T>,
) -> StepOut<E::T> {
    debug_assert_eq!(x.len(), y_prev.len());
    let t_len = x.len();
    let d_inner = p.dims.d_inner();
    let zero_y = e.lift(Arr::zeros_vec(d_inner));

    let mut gates = Vec::with_capacity(t_len);
    let mut drives = Vec::with_capacity(t_len);
    let mut c_bars = Vec::with_capacity(t_len);
    let mut x_adj = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let y_shift = if t == 0 { &zero_y } else { &y_prev[t - 1] };
        let (b_bar, c_bar) = bc_bars(e, bp, &x[t], y_shift, p.y_dep_bc);
        let coef = match &cache.coef {
            Some(cs) => match &cs[t] {
                mixers::MixerCoef::Identity => mixers::MixerCoef::Identity,
                other => other.clone_handles(),
            },
            None => mixers::coefficients(
                e,
                &p.mixer_spec,
                &bp.mixer,
                &x[t],
                Some(y_shift),
            ),
        };
        let xt = adjusted_input(e, &coef, &x[t], &y_prev[t]);
        let dx = e.hadamard(&cache.delta[t], &xt);
        drives.push(e.outer(&b_bar, &dx));
        gates.push(cache.lambda[t].clone());
        c_bars.push(c_bar);
        x_adj.push(xt);
        let _ = b_bar;
    }

    let h_seq = scan_engine(e, &gates, &drives, p.scan_mode);

    let mut y = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let contracted = e.matvec_t(&h_seq[t], &c_bars[t]);
        let skip_src = if p.skip_on_adjusted_input { &x_adj[t] } else { &x[t] };
        let skip = e.hadamard(&bp.d_skip, skip_src);
        let raw = e.add(&contracted, &skip);
        let gated = e.hadamard(&cache.gate[t], &raw);
        y.push(e.l2_normalize(&gated, OUTPUT_NORM_EPS));
    }
    StepOut { y, h_seq }
}

impl<T: Clone> mixers::MixerCoef<T> {
    pub fn clone_handles(&self) -> mixers::MixerCoef<T> {
        match self {
            mixers::MixerCoef::Identity => mixers::MixerCoef::Identity,
            mixers::MixerCoef::Reflections {
                sequential,
                alphas,
                units,
            } => mixers::MixerCoef::Reflections {
                sequential: *sequential,
                alphas: alphas.clone(),
                units: units.clone(),
            },
            mixers::MixerCoef::Kronecker { k1, k2, s } => mixers::MixerCoef::Kronecker {
                k1: k1.clone(),
                k2: k2.clone(),
                s: *s,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Batched fixed-point forward.
// ---------------------------------------------------------------------------

/// Fixed-point iteration map over a batch of sequences, evaluated untaped.
pub struct MambaBatchStep<'p> {
    pub p: &'p FpMambaParams,
    pub bp: BoundFpMamba<Arc<Arr>>,
    pub xs: Vec<Vec<Arc<Arr>>>,
    pub caches: Vec<XCache<Arc<Arr>>>,
}

impl<'p> MambaBatchStep<'p> {
    pub fn new(p: &'p FpMambaParams, xs_plain: &[Vec<VecD>]) -> Self {
        let mut e = Eval;
        let bp = p.bind(&mut e);
        let xs: Vec<Vec<Arc<Arr>>> = xs_plain
            .iter()
            .map(|seq| seq.iter().map(|v| e.lift(Arr::V(v.clone()))).collect())
            .collect();
        let caches = xs
            .iter()
            .map(|x| build_x_cache(&mut e, p, &bp, x))
            .collect();
        MambaBatchStep { p, bp, xs, caches }
    }
}

impl BatchStep for MambaBatchStep<'_> {
    fn batch(&self) -> usize {
        self.xs.len()
    }
    fn zero_state(&self, seq: usize) -> SeqState {
        let d_inner = self.p.dims.d_inner();
        (0..self.xs[seq].len())
            .map(|_| Arc::new(Arr::zeros_vec(d_inner)))
            .collect()
    }
    fn apply(&self, seq: usize, y_prev: &SeqState) -> Result<SeqState> {
        let mut e = Eval;
        let out = fp_mamba_step(&mut e, self.p, &self.bp, &self.xs[seq], y_prev, &self.caches[seq]);
        for (t, y) in out.y.iter().enumerate() {
            if !y.is_finite() {
                return Err(FpError::NonFiniteToken { token: t });
            }
        }
        Ok(out.y)
    }
}

pub struct FpMambaForwardOut {
    pub y_star: Vec<Vec<VecD>>,
    /// Matrix states from one recurrence evaluation at the returned y*.
    pub h_star: Vec<Vec<Mat>>,
    pub ell_star: Vec<usize>,
    pub result: FixedPointResult,
}

/// Solve the layer fixed point on a batch of pre-projected inputs
/// (residuals measured on y, not H).
pub fn fp_mamba_forward(
    p: &FpMambaParams,
    xs: &[Vec<VecD>],
    cfg: &FixedPointConfig,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<FpMambaForwardOut> {
    p.validate()?;
    let step = MambaBatchStep::new(p, xs);
    let result = fixed_point::solve(&step, cfg, 1, rng)?;
    let mut y_star = Vec::with_capacity(xs.len());
    let mut h_star = Vec::with_capacity(xs.len());
    for (seq, y_state) in result.h_star.iter().enumerate() {
        let mut e = Eval;
        let out = fp_mamba_step(&mut e, p, &step.bp, &step.xs[seq], y_state, &step.caches[seq]);
        y_star.push(y_state.iter().map(|a| a.as_vec().clone()).collect());
        h_star.push(out.h_seq.iter().map(|h| h.as_mat().clone()).collect());
    }
    Ok(FpMambaForwardOut {
        y_star,
        h_star,
        ell_star: result.ell_star.clone(),
        result,
    })
}
