//! Minimal dense/convolutional building blocks with explicit backward passes.
//!
//! Everything runs in `f64` on the CPU and is deterministic: no threading, no
//! hidden global state. Each layer exposes `forward` returning a cache and
//! `backward` consuming it, accumulating parameter gradients in place.

mod adam;
mod conv;
mod init;
mod linear;
mod norm;
mod ops;
mod param;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use init::Initializer;
pub use linear::{Linear, LinearCache};
pub use norm::{InstanceNorm2d, NormCache};
pub use ops::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, softmax_rows, upsample2x,
    upsample2x_backward,
};
pub use param::{Param, ParamRefMut};

/// Image/feature tensor laid out `(batch, channels, height, width)`.
pub type Tensor4 = ndarray::Array4<f64>;
/// Row-per-sample matrix `(batch, features)`.
pub type Tensor2 = ndarray::Array2<f64>;
