//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records operations on [`Var`]
//! handles, and [`Tape::backward`] walks the record in reverse. Operations
//! cover what convolutional image-to-image networks and differentiable image
//! distortions need: convolutions, resampling, fixed linear filters, and
//! elementwise maps. Everything runs single-threaded and is bitwise
//! deterministic for a given input.
//!
//! ```
//! use cpmark_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]));
//! let y = (x * x).sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod real;
mod tape;
mod tensor;

pub mod ops;

pub use ops::elementwise::{round_cubic, round_cubic_grad};
pub use ops::filter::dct8_basis;
pub use ops::sample::{reflect_index, IDENTITY_AFFINE};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
