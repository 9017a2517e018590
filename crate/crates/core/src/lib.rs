//! Linear-complexity cross-task attention for multi-task dense prediction.
//!
//! The crate is a self-contained CPU implementation of the compute core of
//! MTLSI-style coarse-to-fine multi-task networks:
//!
//! - [`tensor`]: dense row-major tensors plus the forward kernels every
//!   block is built from (matmul, depthwise/regular conv, pooling, norms,
//!   softmax).
//! - [`tape`]: reverse-mode autodiff over those kernels.
//! - [`linear_attention`]: kernelized linear attention with the ELU+1
//!   feature map and its quadratic reference used for equivalence testing.
//! - [`fusion`]: the multi-task multi-scale query linear fusion block
//!   (MT-MQLFB) — per-scale depthwise-conv queries over concatenated task
//!   features attending to one shared global context.
//! - [`distiller`]: soft-assignment compression of the fused sequence into
//!   K semantic tokens.
//! - [`cwib`]: the cross-window integrated attention block — window
//!   self-attention plus cross-attention over the distilled tokens.
//! - [`pipeline`]: a desk-scale coarse-to-fine model, synthetic multi-task
//!   data, losses and a training loop.
//!
//! Everything is generic over [`tensor::Real`] so f32 (training, benches)
//! and f64 (gradient checks, oracle equivalence) share one code path. The
//! crate is `no_std` + `alloc`; IO, timing and file formats live in the
//! companion `mtlsi` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cwib;
pub mod distiller;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod linear_attention;
pub mod mhsa;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

/// Epsilon used by layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass uses batch statistics (train) or running
/// statistics (eval) in batch-norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}
