//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! Operators record onto a [`Tape`]; [`Tape::backward`] sweeps it in reverse.
//! Backward rules are themselves expressed as tape operators, so
//! [`Tape::grad_graph`] yields differentiable gradients and Hessian-vector
//! products fall out of a second sweep.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use kernels::ConvGeometry;
pub use tape::{sigmoid, CustomOp, Gradients, StraightThrough, Tape, Var};
