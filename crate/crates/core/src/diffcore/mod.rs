//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix; scalars are `1 x 1`. Ops are
//! recorded in execution order, so the backward sweep simply walks the tape
//! from the loss node down to index zero.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{AttnSpec, Gradients, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Floating point element type of tensors. Implemented for `f32` (training)
/// and `f64` (gradient checks and tests).
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided ranges.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at step {step}")]
    NonFinite { op: &'static str, step: u64 },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this tape; record a fresh forward pass first")]
    BackwardTwice,
    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("parameters from a second store bound on the same tape")]
    ForeignStore,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}
