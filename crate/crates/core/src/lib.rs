//! Gradient-based adversarial attacks (FGSM, BIM, PGD) against a small
//! convolutional classifier, and a convolutional-autoencoder purification
//! defense, on MNIST-format data.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f32` instantiations used for training and evaluation.

pub mod attacks;
pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
