//! Error type shared by all modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by tensor ops, blocks and the training loop.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Operand extents do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An argument violates the operation's contract.
    InvalidArg { op: &'static str, msg: String },
    /// A value that must stay finite became NaN or infinite.
    NonFinite { op: &'static str },
    /// Training aborted because the loss went non-finite at this step.
    Diverged { step: usize },
    /// Optimizer was stepped past its configured schedule horizon.
    StepBeyondHorizon { step: usize, t_max: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            CoreError::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            CoreError::Diverged { step } => write!(f, "loss diverged at step {step}"),
            CoreError::StepBeyondHorizon { step, t_max } => {
                write!(f, "optimizer step {step} beyond schedule horizon {t_max}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArg {
        op,
        msg: msg.into(),
    }
}
