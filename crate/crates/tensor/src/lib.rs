//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are NCHW, row-major and immutable once produced. Every op that
//! consumes a tensor requiring gradients records a backward closure; calling
//! [`Tensor::backward`] on a scalar accumulates gradients into the trainable
//! leaves. The element type is generic over [`Scalar`] so the same code runs
//! in `f32` for training and in `f64` for finite-difference checks.

mod error;
pub mod gradcheck;
mod ops;
mod rng;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{Activation, ConvSpec, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use rng::SeedRng;
pub use scalar::Scalar;
pub use tensor::{is_grad_enabled, no_grad, BackwardCtx, ParentGrads, Tensor};

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    ops::sigmoid_scalar(x)
}
