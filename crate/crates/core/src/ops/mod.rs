//! Forward and backward kernels for every differentiable operation.
//!
//! Kernels are pure functions on [`Tensor`](crate::Tensor) values; the
//! [`Tape`](crate::Tape) records which kernel produced each node and calls
//! the matching backward rule.

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod softmax;
pub mod sparse;
pub mod upsample;
