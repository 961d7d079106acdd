//! Dense linear RNNs as fixed points of gated diagonal linear RNNs.
//!
//! The layer family implemented here expresses a dense, selective linear
//! recurrence `h_t = A_t h_{t-1} + B_t x_t` implicitly, as the fixed point of
//! a parallelizable *diagonal* recurrence that interleaves a per-channel
//! sequence gate with a structured channel mixer. The crate provides:
//!
//! - [`numerics`]: the small dense linear-algebra kernel layer (f64 only),
//! - [`mixers`]: structured channel mixers (DPLR, Householder, Kronecker),
//! - [`scan`]: sequential and log-depth evaluation of gated diagonal
//!   recurrences, plus one full fixed-point iteration for the vector model,
//! - [`fixed_point`]: the damped Picard solver with its stopping rule, and
//!   the explicit dense oracle used for differential testing,
//! - [`fp_mamba`]: the matrix-state selective layer iterated to a fixed point,
//! - [`autodiff`]: a reverse-mode tape scoped to the last `k` iterations,
//!   and the implicit-differentiation oracles,
//! - [`train`]: loss, AdamW, gradient clipping and LR schedules,
//! - [`tasks`]: seeded generators for state tracking, copying and modular
//!   arithmetic,
//! - [`model`] / [`harness`]: end-to-end models, training/eval orchestration,
//!   checkpoints, metrics and the property suite.

pub mod autodiff;
pub mod error;
pub mod fixed_point;
pub mod fp_mamba;
pub mod harness;
pub mod mixers;
pub mod model;
pub mod numerics;
pub mod scan;
pub mod tasks;
pub mod train;

pub use error::FpError;
pub type Result<T> = std::result::Result<T, FpError>;
