//! Tape-based automatic differentiation over dense `f64` tensors.
//!
//! Design points:
//!
//! * One [`Tape`] records a full computation (a Wengert list). Reverse mode
//!   ([`Tape::backward`]) produces gradients for every named parameter used
//!   on the tape.
//! * Forward mode is carried *alongside* the primal computation: any leaf may
//!   declare a tangent, and every operation propagates tangents as it is
//!   recorded. This yields Jacobian-vector products (JVPs) in a single pass,
//!   and the resulting tangent tensors are plain data — they are naturally
//!   outside the reverse-mode graph.
//! * [`Tape::detach`] is a first-class stop-gradient: the value passes
//!   through, derivatives (both modes) do not.
//! * Every operation validates shapes and checks its output for non-finite
//!   values, so NaNs fail loudly at their source.

mod params;
mod schedule;
mod tape;
mod tensor;

pub use params::{xavier_uniform, normal_init, AdamW, ParamStore};
pub use schedule::cosine_lr;
pub use tape::{jvp, DualTensor, GradMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and the parameter
/// store.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: slice [{start}, {start}+{len}) out of bounds for extent {extent}")]
    BadSlice {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("parameter '{name}' already exists")]
    DuplicateParam { name: String },
    #[error("concat requires at least one input")]
    EmptyConcat,
}
