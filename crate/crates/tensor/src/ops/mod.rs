//! Differentiable operations, implemented as methods on [`Var`](crate::Var).

pub mod conv;
pub mod elementwise;
pub mod filter;
pub mod linalg;
pub mod sample;
pub mod shape;
