//! Domain-agnostic image-to-image translation conditioned on very
//! low-resolution targets.
//!
//! A generator fuses the high-frequency detail of an HR source image with the
//! low-frequency structure of an LR target, and is trained adversarially so
//! that its output downscales (up to color quantization) onto that target.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod norm;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autograd::Var;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;

pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type Discriminator32 = networks::Discriminator<f32>;
pub type Discriminator64 = networks::Discriminator<f64>;

pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
