//! A compact reverse-mode autodiff engine for convolutional networks.
//!
//! Supports the handful of operations an image-to-image GAN needs
//! (strided convolutions and their transposes, batch normalisation, affine
//! layers, pointwise nonlinearities) with gradients of gradients, which the
//! gradient-penalty critic objective requires.

pub mod graph;
pub mod nn;
pub mod tensor;

pub use graph::{grad, Var};
pub use nn::{Adam, BatchNorm, Conv2d, ConvTranspose2d, Ctx, Linear, ParamId, ParamStore};
pub use tensor::{ConvGeometry, Scalar, Tensor};
