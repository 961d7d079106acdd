//! Structured channel mixers Q_t.
//!
//! Three families, all producing coefficients from the current token input
//! (and, when enabled, the shifted hidden state from the previous
//! iteration):
//!
//! - diagonal-plus-low-rank: Q = I - Σᵢ αᵢ ūᵢ ūᵢᵀ,
//! - Householder products:   Q = Πᵢ (I - αᵢ ūᵢ ūᵢᵀ),
//! - Kronecker:              Q = I - K̄¹ ⊗ K̄².
//!
//! Applying Q (or I - Q) never materializes the dense matrix; the cost is
//! linear in the state size for the rank/reflection families and O(d·s) for
//! the Kronecker family. Materialization is allowed only in the diagnostic
//! [`contraction_margin`].


use crate::autodiff::{Arr, Engine, Eval, MapKind};
use crate::numerics::{self, Mat, VecD};
use crate::{FpError, Result};

pub const UNIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerVariant {
    Dplr,
    Householder,
    Kronecker,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MixerSpec {
    pub variant: MixerVariant,
    /// Reflections or rank; unused for the Kronecker family.
    pub rank_r: usize,
    pub d_inner: usize,
    /// Feed the shifted previous-iteration output into the coefficient maps.
    pub hidden_dependence: bool,
    /// Strict-contraction margin for the Kronecker factors.
    pub contraction_eps: f64,
    /// Normalize Kronecker factors by the top eigenvalue alone (norm ≤ 1
    /// instead of ≤ 1 - eps).
    #[serde(default)]
    pub exact_eigen_normalization: bool,
    /// Divide Householder αᵢ by the number of reflections so that
    /// ‖I - Q‖ ≤ max αᵢ < 1 holds for r > 1.
    #[serde(default)]
    pub alpha_rescale: bool,
}

impl MixerSpec {
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            MixerVariant::Dplr | MixerVariant::Householder => {
                if self.rank_r < 1 {
                    return Err(FpError::InvalidConfig(
                        "rank_r must be >= 1 for dplr/householder".into(),
                    ));
                }
            }
            MixerVariant::Kronecker => {
                let s = self.factor_dim();
                if s * s != self.d_inner {
                    return Err(FpError::InvalidConfig(format!(
                        "kronecker requires square d_inner, got {}",
                        self.d_inner
                    )));
                }
            }
        }
        if !(self.contraction_eps > 0.0 && self.contraction_eps < 1.0) {
            return Err(FpError::InvalidConfig(
                "contraction_eps must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Side length s of the Kronecker factors (d_inner = s²).
    pub fn factor_dim(&self) -> usize {
        (self.d_inner as f64).sqrt().round() as usize
    }

    /// Entries parameterizing one triangular Cholesky factor.
    pub fn tri_len(&self) -> usize {
        let s = self.factor_dim();
        s * (s + 1) / 2
    }
}

/// Weights behind one reflection / rank-1 term.
#[derive(Debug, Clone)]
pub struct ReflectionWeights {
    pub w_u_x: Mat,      // d_inner × d_inner
    pub w_u_y: Mat,      // d_inner × d_inner
    pub w_alpha_x: VecD, // d_inner
    pub w_alpha_y: VecD, // d_inner
    pub b_alpha: f64,
}

/// Weights behind one Kronecker factor.
#[derive(Debug, Clone)]
pub struct KroneckerFactorWeights {
    pub w_k_x: Mat, // s(s+1)/2 × d_inner
    pub w_k_y: Mat, // s(s+1)/2 × d_inner
    pub b_k: VecD,  // s(s+1)/2
}

#[derive(Debug, Clone)]
pub enum MixerWeights {
    Reflections(Vec<ReflectionWeights>),
    Kronecker(Box<[KroneckerFactorWeights; 2]>),
}

impl MixerWeights {
    pub fn check_shapes(&self, spec: &MixerSpec) -> Result<()> {
        let d = spec.d_inner;
        match (self, spec.variant) {
            (MixerWeights::Reflections(refls), MixerVariant::Dplr | MixerVariant::Householder) => {
                if refls.len() != spec.rank_r {
                    return Err(FpError::shape(
                        "mixer weights",
                        format!("{} reflections", spec.rank_r),
                        format!("{}", refls.len()),
                    ));
                }
                for r in refls {
                    if r.w_u_x.rows != d
                        || r.w_u_x.cols != d
                        || r.w_u_y.rows != d
                        || r.w_u_y.cols != d
                        || r.w_alpha_x.dim() != d
                        || r.w_alpha_y.dim() != d
                    {
                        return Err(FpError::shape(
                            "mixer weights",
                            format!("d_inner = {d}"),
                            "inconsistent reflection weight shapes".to_string(),
                        ));
                    }
                }
                Ok(())
            }
            (MixerWeights::Kronecker(factors), MixerVariant::Kronecker) => {
                let tri = spec.tri_len();
                for f in factors.iter() {
                    if f.w_k_x.rows != tri
                        || f.w_k_x.cols != d
                        || f.w_k_y.rows != tri
                        || f.w_k_y.cols != d
                        || f.b_k.dim() != tri
                    {
                        return Err(FpError::shape(
                            "mixer weights",
                            format!("{tri} x {d} factors"),
                            "inconsistent kronecker weight shapes".to_string(),
                        ));
                    }
                }
                Ok(())
            }
            _ => Err(FpError::InvalidConfig(
                "mixer weights do not match mixer variant".into(),
            )),
        }
    }
}

/// Engine-bound mixer weights (handles instead of arrays).
pub struct BoundReflection<T> {
    pub w_u_x: T,
    pub w_u_y: T,
    pub w_alpha_x: T,
    pub w_alpha_y: T,
    pub b_alpha: T,
}

pub struct BoundKroneckerFactor<T> {
    pub w_k_x: T,
    pub w_k_y: T,
    pub b_k: T,
}

pub enum BoundMixerWeights<T> {
    Reflections(Vec<BoundReflection<T>>),
    Kronecker([BoundKroneckerFactor<T>; 2]),
}

impl MixerWeights {
    pub fn bind<E: Engine>(&self, e: &mut E) -> BoundMixerWeights<E::T> {
        match self {
            MixerWeights::Reflections(refls) => BoundMixerWeights::Reflections(
                refls
                    .iter()
                    .map(|r| BoundReflection {
                        w_u_x: e.lift(Arr::M(r.w_u_x.clone())),
                        w_u_y: e.lift(Arr::M(r.w_u_y.clone())),
                        w_alpha_x: e.lift(Arr::V(r.w_alpha_x.clone())),
                        w_alpha_y: e.lift(Arr::V(r.w_alpha_y.clone())),
                        b_alpha: e.lift(Arr::scalar(r.b_alpha)),
                    })
                    .collect(),
            ),
            MixerWeights::Kronecker(factors) => {
                let mut bound = factors.iter().map(|f| BoundKroneckerFactor {
                    w_k_x: e.lift(Arr::M(f.w_k_x.clone())),
                    w_k_y: e.lift(Arr::M(f.w_k_y.clone())),
                    b_k: e.lift(Arr::V(f.b_k.clone())),
                });
                let a = bound.next().unwrap();
                let b = bound.next().unwrap();
                BoundMixerWeights::Kronecker([a, b])
            }
        }
    }
}

/// Per-token mixer coefficients, engine-generic.
pub enum MixerCoef<T> {
    /// `sequential` distinguishes the Householder product from the DPLR sum.
    Reflections {
        sequential: bool,
        alphas: Vec<T>,
        units: Vec<T>,
    },
    Kronecker { k1: T, k2: T, s: usize },
    /// Q = I (identity mixer; the diagonal-model limit).
    Identity,
}

/// Compute the per-token coefficients from input (and optional shifted
/// hidden state): ūᵢ = normalize(SiLU(Wᵤˣ x + Wᵤʸ y)), αᵢ = σ(⟨wₐˣ, x⟩ +
/// ⟨wₐʸ, y⟩ + bₐ); Kronecker factors via the triangular Cholesky structure
/// Kⁿ = LLᵀ rescaled below the contraction threshold.
pub fn coefficients<E: Engine>(
    e: &mut E,
    spec: &MixerSpec,
    w: &BoundMixerWeights<E::T>,
    x: &E::T,
    y_shift: Option<&E::T>,
) -> MixerCoef<E::T> {
    debug_assert_eq!(spec.hidden_dependence, y_shift.is_some());
    match w {
        BoundMixerWeights::Reflections(refls) => {
            let mut alphas = Vec::with_capacity(refls.len());
            let mut units = Vec::with_capacity(refls.len());
            for r in refls {
                let mut pre = e.matvec(&r.w_u_x, x);
                if let Some(y) = y_shift {
                    let ypart = e.matvec(&r.w_u_y, y);
                    pre = e.add(&pre, &ypart);
                }
                let act = e.map(MapKind::Silu, &pre);
                let unit = e.l2_normalize(&act, UNIT_EPS);
                let mut logit = e.dot(&r.w_alpha_x, x);
                if let Some(y) = y_shift {
                    let ydot = e.dot(&r.w_alpha_y, y);
                    logit = e.add(&logit, &ydot);
                }
                logit = e.add(&logit, &r.b_alpha);
                let mut alpha = e.map(MapKind::Sigmoid, &logit);
                if spec.alpha_rescale && spec.variant == MixerVariant::Householder {
                    alpha = e.scale(&alpha, 1.0 / spec.rank_r as f64);
                }
                alphas.push(alpha);
                units.push(unit);
            }
            MixerCoef::Reflections {
                sequential: spec.variant == MixerVariant::Householder,
                alphas,
                units,
            }
        }
        BoundMixerWeights::Kronecker(factors) => {
            let s = spec.factor_dim();
            let margin = if spec.exact_eigen_normalization {
                0.0
            } else {
                spec.contraction_eps
            };
            let mut ks = factors.iter().map(|f| {
                let mut logits = e.matvec(&f.w_k_x, x);
                if let Some(y) = y_shift {
                    let ypart = e.matvec(&f.w_k_y, y);
                    logits = e.add(&logits, &ypart);
                }
                logits = e.add(&logits, &f.b_k);
                let act = e.map(MapKind::Silu, &logits);
                let l = e.lower_tri(&act, s);
                let k = e.matmul_nt(&l, &l);
                e.spectral_scale(&k, margin)
            });
            let k1 = ks.next().unwrap();
            let k2 = ks.next().unwrap();
            MixerCoef::Kronecker { k1, k2, s }
        }
    }
}

/// Apply Q to a vector without materializing it.
pub fn apply_q<E: Engine>(e: &mut E, coef: &MixerCoef<E::T>, v: &E::T) -> E::T {
    match coef {
        MixerCoef::Identity => v.clone(),
        MixerCoef::Reflections {
            sequential,
            alphas,
            units,
        } => {
            if *sequential {
                // Householder product; the i = 1 factor acts last.
                let mut w = v.clone();
                for (alpha, u) in alphas.iter().zip(units.iter()).rev() {
                    let proj = e.dot(u, &w);
                    let coeff = e.hadamard(alpha, &proj);
                    let corr = e.smul(&coeff, u);
                    w = e.sub(&w, &corr);
                }
                w
            } else {
                let mut w = v.clone();
                for (alpha, u) in alphas.iter().zip(units.iter()) {
                    let proj = e.dot(u, v);
                    let coeff = e.hadamard(alpha, &proj);
                    let corr = e.smul(&coeff, u);
                    w = e.sub(&w, &corr);
                }
                w
            }
        }
        MixerCoef::Kronecker { k1, k2, s } => {
            // (K̄¹ ⊗ K̄²) v = vec(K̄² mat(v) K̄¹ᵀ) under column-major reshape.
            let xm = e.mat_c(v, *s);
            let t = e.matmul(k2, &xm);
            let z = e.matmul_nt(&t, k1);
            let flat = e.vec_c(&z);
            e.sub(v, &flat)
        }
    }
}

/// Apply I - Q: the exact complement v - apply_q(v).
pub fn apply_i_minus_q<E: Engine>(e: &mut E, coef: &MixerCoef<E::T>, v: &E::T) -> E::T {
    let qv = apply_q(e, coef, v);
    e.sub(v, &qv)
}

// ---------------------------------------------------------------------------
// Plain (array-level) interface.
// ---------------------------------------------------------------------------

/// Materialized per-token coefficients.
#[derive(Debug, Clone)]
pub enum MixerCoefficients {
    Reflections {
        sequential: bool,
        alphas: Vec<f64>,
        units: Vec<VecD>,
    },
    Kronecker { k1: Mat, k2: Mat },
    Identity { d_inner: usize },
}

impl MixerCoefficients {
    /// Lift materialized coefficients into an engine (they enter as
    /// constants, not parameters).
    pub fn bind<E: Engine>(&self, e: &mut E) -> MixerCoef<E::T> {
        match self {
            MixerCoefficients::Reflections {
                sequential,
                alphas,
                units,
            } => MixerCoef::Reflections {
                sequential: *sequential,
                alphas: alphas.iter().map(|&a| e.lift(Arr::scalar(a))).collect(),
                units: units.iter().map(|u| e.lift(Arr::V(u.clone()))).collect(),
            },
            MixerCoefficients::Kronecker { k1, k2 } => MixerCoef::Kronecker {
                k1: e.lift(Arr::M(k1.clone())),
                k2: e.lift(Arr::M(k2.clone())),
                s: k1.rows,
            },
            MixerCoefficients::Identity { .. } => MixerCoef::Identity,
        }
    }

    pub fn d_inner(&self) -> usize {
        match self {
            MixerCoefficients::Reflections { units, .. } => units[0].dim(),
            MixerCoefficients::Kronecker { k1, .. } => k1.rows * k1.rows,
            MixerCoefficients::Identity { d_inner } => *d_inner,
        }
    }
}

/// Plain coefficient computation; validates dimensions.
pub fn coefficients_from_input(
    spec: &MixerSpec,
    w: &MixerWeights,
    x: &VecD,
    y_shift: Option<&VecD>,
) -> Result<MixerCoefficients> {
    spec.validate()?;
    w.check_shapes(spec)?;
    if x.dim() != spec.d_inner {
        return Err(FpError::shape(
            "coefficients_from_input",
            format!("x of dim {}", spec.d_inner),
            format!("{}", x.dim()),
        ));
    }
    if spec.hidden_dependence != y_shift.is_some() {
        return Err(FpError::InvalidConfig(
            "y_shift must be present iff spec.hidden_dependence".into(),
        ));
    }
    if let Some(y) = y_shift {
        if y.dim() != spec.d_inner {
            return Err(FpError::shape(
                "coefficients_from_input",
                format!("y_shift of dim {}", spec.d_inner),
                format!("{}", y.dim()),
            ));
        }
    }
    let mut e = Eval;
    let bound = w.bind(&mut e);
    let xh = e.lift(Arr::V(x.clone()));
    let yh = y_shift.map(|y| e.lift(Arr::V(y.clone())));
    let coef = coefficients(&mut e, spec, &bound, &xh, yh.as_ref());
    Ok(match coef {
        MixerCoef::Reflections {
            sequential,
            alphas,
            units,
        } => MixerCoefficients::Reflections {
            sequential,
            alphas: alphas.iter().map(|a| a.as_scalar()).collect(),
            units: units.iter().map(|u| u.as_vec().clone()).collect(),
        },
        MixerCoef::Kronecker { k1, k2, .. } => MixerCoefficients::Kronecker {
            k1: k1.as_mat().clone(),
            k2: k2.as_mat().clone(),
        },
        MixerCoef::Identity => MixerCoefficients::Identity { d_inner: spec.d_inner },
    })
}

/// Plain Q application.
pub fn apply_q_plain(c: &MixerCoefficients, v: &VecD) -> Result<VecD> {
    if v.dim() != c.d_inner() {
        return Err(FpError::shape(
            "apply_q",
            format!("dim {}", c.d_inner()),
            format!("{}", v.dim()),
        ));
    }
    let mut e = Eval;
    let coef = c.bind(&mut e);
    let vh = e.lift(Arr::V(v.clone()));
    Ok(apply_q(&mut e, &coef, &vh).as_vec().clone())
}

/// Plain I - Q application: v - apply_q(v).
pub fn apply_i_minus_q_plain(c: &MixerCoefficients, v: &VecD) -> Result<VecD> {
    Ok(v.sub(&apply_q_plain(c, v)?))
}

/// Materialize I - Q column by column and return its spectral norm.
/// Diagnostic only; fine for d up to a few hundred.
pub fn contraction_margin(c: &MixerCoefficients, d_inner: usize) -> f64 {
    let m = materialize_i_minus_q(c, d_inner);
    numerics::spectral_norm(&m, 300, 0x5eed).expect("finite coefficients")
}

/// Dense I - Q, via application to basis vectors.
pub fn materialize_i_minus_q(c: &MixerCoefficients, d_inner: usize) -> Mat {
    let mut m = Mat::zeros(d_inner, d_inner);
    for j in 0..d_inner {
        let mut ej = VecD::zeros(d_inner);
        ej.data[j] = 1.0;
        let col = apply_i_minus_q_plain(c, &ej).expect("dimension checked");
        for i in 0..d_inner {
            m.data[i * d_inner + j] = col.data[i];
        }
    }
    m
}

/// Dense Q, via application to basis vectors (test/diagnostic use).
pub fn materialize_q(c: &MixerCoefficients, d_inner: usize) -> Mat {
    let mut m = Mat::zeros(d_inner, d_inner);
    for j in 0..d_inner {
        let mut ej = VecD::zeros(d_inner);
        ej.data[j] = 1.0;
        let col = apply_q_plain(c, &ej).expect("dimension checked");
        for i in 0..d_inner {
            m.data[i * d_inner + j] = col.data[i];
        }
    }
    m
}

/// Gaussian mixer weights with 1/sqrt(fan_in) scale.
pub fn init_mixer_weights(
    spec: &MixerSpec,
    rng: &mut (impl rand::Rng + ?Sized),
) -> MixerWeights {
    let d = spec.d_inner;
    fn gauss(rng: &mut (impl rand::Rng + ?Sized), rows: usize, cols: usize, scale: f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = crate::model::normal_sample(rng) * scale;
        }
        m
    }
    match spec.variant {
        MixerVariant::Dplr | MixerVariant::Householder => {
            let scale = 1.0 / (d as f64).sqrt();
            MixerWeights::Reflections(
                (0..spec.rank_r)
                    .map(|_| ReflectionWeights {
                        w_u_x: gauss(rng, d, d, scale),
                        w_u_y: gauss(rng, d, d, scale),
                        w_alpha_x: VecD::from(
                            (0..d).map(|_| crate::model::normal_sample(rng) * scale).collect(),
                        ),
                        w_alpha_y: VecD::from(
                            (0..d).map(|_| crate::model::normal_sample(rng) * scale).collect(),
                        ),
                        b_alpha: 0.0,
                    })
                    .collect(),
            )
        }
        MixerVariant::Kronecker => {
            let tri = spec.tri_len();
            let scale = 1.0 / (d as f64).sqrt();
            let mut factor = || KroneckerFactorWeights {
                w_k_x: gauss(rng, tri, d, scale),
                w_k_y: gauss(rng, tri, d, scale),
                b_k: VecD::zeros(tri),
            };
            MixerWeights::Kronecker(Box::new([factor(), factor()]))
        }
    }
}
