//! Loss, optimizer, schedules, and reverse-mode differentiation scoped to
//! the last k fixed-point iterations.

use crate::autodiff::{Arr, Engine, Tape, Var};
use crate::numerics::VecD;
use crate::{FpError, Result};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear ramp over `warmup` steps, then linear decay to zero at `total`.
    LinearWarmupDecay { warmup: usize, total: usize },
    /// Linear ramp over `warmup` steps, then cosine decay to
    /// `floor_factor` × peak at `total`.
    CosineWarmup {
        warmup: usize,
        total: usize,
        floor_factor: f64,
    },
}

impl Schedule {
    pub fn lr_at(&self, peak: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => peak,
            Schedule::LinearWarmupDecay { warmup, total } => {
                if step < warmup {
                    peak * step as f64 / warmup.max(1) as f64
                } else if step >= total {
                    0.0
                } else {
                    let span = (total - warmup).max(1) as f64;
                    peak * (1.0 - (step - warmup) as f64 / span)
                }
            }
            Schedule::CosineWarmup {
                warmup,
                total,
                floor_factor,
            } => {
                let floor = floor_factor * peak;
                if step < warmup {
                    peak * step as f64 / warmup.max(1) as f64
                } else {
                    let span = (total.saturating_sub(warmup)).max(1) as f64;
                    let progress = ((step - warmup) as f64 / span).min(1.0);
                    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub schedule: Schedule,
    /// Number of trailing iterations to differentiate through; 0 records
    /// only the final one (gradient at the fixed point).
    pub k_backprop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: Schedule::Constant,
            k_backprop: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(FpError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }

    /// Recorded trailing steps for a given k.
    pub fn recorded_steps(&self) -> usize {
        self.k_backprop.max(1)
    }
}

/// Decoupled-weight-decay Adam on one parameter array.
///
/// p ← p(1 - lr·wd) - lr·m̂ / (sqrt(v̂) + eps), with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    cfg: &TrainConfig,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment buffers, one pair of slots per parameter array.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

impl AdamWState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamWState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Global-norm clip (in place) and the scheduled learning rate.
/// Returns (scale_applied, lr).
pub fn clip_and_schedule(
    grads: &mut [Arr],
    step_index: usize,
    cfg: &TrainConfig,
) -> (f64, f64) {
    let mut scale = 1.0;
    if let Some(clip) = cfg.clip_norm {
        let norm: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            scale = clip / norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    (scale, cfg.schedule.lr_at(cfg.lr, step_index))
}

/// Mean token-level cross entropy over masked positions, with logit
/// gradients (softmax - onehot, scaled by 1/n_masked; zero off-mask).
pub fn cross_entropy_masked(
    logits: &[VecD],
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Vec<VecD>)> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(FpError::shape(
            "cross_entropy_masked",
            format!("{} positions", logits.len()),
            format!("targets {}, mask {}", targets.len(), mask.len()),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(FpError::EmptyMask);
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for t in 0..logits.len() {
        if mask[t] {
            let (loss, mut g) = crate::autodiff::ce_position_public(&logits[t], targets[t] as usize);
            total += loss;
            for v in g.data.iter_mut() {
                *v *= scale;
            }
            grads.push(g);
        } else {
            grads.push(VecD::zeros(logits[t].dim()));
        }
    }
    Ok((total * scale, grads))
}

// ---------------------------------------------------------------------------
// k-truncated backward through a recorded step.
// ---------------------------------------------------------------------------

/// A step that can be re-recorded on a tape: parameters in a canonical
/// order, and a builder mapping (params, x, h) to the next state.
pub trait TapeStep {
    fn params(&self) -> Vec<Arr>;
    fn build(&self, tape: &mut Tape, params: &[Var], x: &[Var], h: &[Var]) -> Vec<Var>;
}

pub struct FixedPointBackward {
    pub param_grads: Vec<Arr>,
    pub input_grads: Vec<Arr>,
}

/// Record the last `deltas.len()` damped iterations starting from the
/// detached iterate `h_base`, seed the outputs with `upstream`, and reverse.
/// The solver loop itself is never differentiated; memory is proportional
/// to the number of recorded steps.
///
/// When `h_star_check` is given, the recomputed final iterate must match it
/// (relative infinity deviation ≤ 1e-8), otherwise the recorded computation
/// diverged from the forward map actually evaluated.
pub fn backward_at_fixed_point(
    step: &impl TapeStep,
    x: &[Arr],
    h_base: &[Arr],
    deltas: &[f64],
    upstream: &[Arr],
    h_star_check: Option<&[Arr]>,
) -> Result<FixedPointBackward> {
    assert!(!deltas.is_empty(), "at least one recorded step required");
    let mut tape = Tape::new();
    let param_arrays = step.params();
    let param_vars: Vec<Var> = param_arrays
        .iter()
        .map(|a| tape.lift(a.clone()))
        .collect();
    let x_vars: Vec<Var> = x.iter().map(|a| tape.lift(a.clone())).collect();
    let mut h_vars: Vec<Var> = h_base.iter().map(|a| tape.lift(a.clone())).collect();

    for &delta in deltas {
        let f_vars = step.build(&mut tape, &param_vars, &x_vars, &h_vars);
        h_vars = if delta == 1.0 {
            f_vars
        } else {
            f_vars
                .iter()
                .zip(h_vars.iter())
                .map(|(f, h)| {
                    let a = tape.scale(f, delta);
                    let b = tape.scale(h, 1.0 - delta);
                    tape.add(&a, &b)
                })
                .collect()
        };
    }

    if let Some(expect) = h_star_check {
        let mut dev = 0.0f64;
        let mut scale = 0.0f64;
        for (hv, ex) in h_vars.iter().zip(expect.iter()) {
            let got = tape.value(*hv);
            for (a, b) in got.data().iter().zip(ex.data().iter()) {
                dev = dev.max((a - b).abs());
                scale = scale.max(b.abs());
            }
        }
        if dev > 1e-8 * scale.max(1.0) {
            return Err(FpError::TapeReplayMismatch { deviation: dev });
        }
    }

    let seeds: Vec<(Var, Arr)> = h_vars
        .iter()
        .zip(upstream.iter())
        .map(|(v, u)| (*v, u.clone()))
        .collect();
    let grads = tape.backward_seeded(&seeds);
    let take = |v: &Var, proto: &Arr| -> Arr {
        grads[v.0].clone().unwrap_or_else(|| proto.zeros_like())
    };
    Ok(FixedPointBackward {
        param_grads: param_vars
            .iter()
            .zip(param_arrays.iter())
            .map(|(v, p)| take(v, p))
            .collect(),
        input_grads: x_vars
            .iter()
            .zip(x.iter())
            .map(|(v, p)| take(v, p))
            .collect(),
    })
}
