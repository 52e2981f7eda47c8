//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The engine records every differentiable primitive executed on tensors that
//! require gradients. Calling [`Tensor::backward`] on a scalar loss replays
//! the recorded primitives in reverse, accumulating gradients into every
//! tensor on the path. Gradients sum when a tensor feeds multiple consumers.
//!
//! Two precisions are supported through the [`Scalar`] trait: `f32` is the
//! training/inference default, `f64` exists for finite-difference gradient
//! verification (see [`gradcheck`]), where single-precision tolerances are
//! unreachable.
//!
//! Tensors are cheap reference-counted handles and are not `Send`; to run
//! inference from several threads, give each thread its own copy of the
//! parameters (e.g. by loading the same checkpoint). Primitives parallelize
//! internally over independent output elements only, so results are
//! bit-identical across runs regardless of thread count.

mod adam;
mod error;
mod scalar;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};
