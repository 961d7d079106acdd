//! Reverse-mode automatic differentiation scoped to fixed-point training.
//!
//! The fixed-point solver runs untaped; only the last `k` iterations (one,
//! for the default `k = 0` gradient-at-the-fixed-point) are recorded on a
//! [`Tape`] and reversed. Step functions are written once against the
//! [`Engine`] trait and run identically under plain evaluation ([`Eval`])
//! and under recording ([`Tape`]), so the recorded computation is the same
//! map the solver evaluated.

mod engine;
mod fd;
mod implicit;
mod kernels;
mod tape;
mod value;

pub use engine::{Engine, Eval};
pub use fd::{central_grad, flat_picard_solve};
pub use implicit::{
    descent_direction_check, implicit_gradient_small, k0_gradient_flat, DescentInstance,
};
pub use kernels::{log_sum_exp, MapKind};
pub use tape::{Op, Tape, Var};
pub use value::Arr;

/// Cross entropy of one position plus its logit gradient.
pub fn ce_position_public(
    logits: &crate::numerics::VecD,
    target: usize,
) -> (f64, crate::numerics::VecD) {
    kernels::ce_position(logits, target)
}
