//! Reverse-mode differentiable tensor engine.
//!
//! Values are dense row-major arrays (`Tensor<T>`). Differentiable programs
//! are built by recording operations on a [`Tape`], which owns every
//! intermediate value and replays the recorded operations in reverse to
//! accumulate gradients. The engine is generic over the scalar type: `f32`
//! is the compute path, `f64` is the shadow mode used by the
//! finite-difference verification harness in [`gradcheck`].

mod error;
mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod io;
pub mod suite;

pub use error::TensorError;
pub use scalar::Scalar;
pub use tape::{ConvSpec, MhaWeights, ParamKey, Tape, VarId};
pub use tensor::Tensor;
