//! CPU implementation of a configurable 3D U-Net with batch normalization,
//! soft Dice losses and the Adam optimizer.
//!
//! Every layer has a hand-written backward pass. All kernels are generic over
//! [`Scalar`] so the same code runs in `f32` for training and in `f64` when
//! gradients are checked against finite differences.
//!
//! With the `parallel` feature (on by default) the heavy loops run on rayon.
//! Work is always split into the same fixed chunks and partial reductions are
//! merged in chunk order, so results do not depend on the thread count.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod loss;
pub mod ops;
pub mod par;
pub mod params;
mod scalar;
pub mod tensor;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use params::{Gradients, NetworkParams, ParamKind, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{Mode, Trace, UNet, UNetConfig};
