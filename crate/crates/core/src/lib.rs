//! Multi-agent pedestrian trajectory prediction with a factorized
//! spatio-temporal transformer and non-autoregressive decoding.

pub mod baselines;
pub mod benchmark;
pub mod comma;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Pretr32 = model::Pretr<f32>;
pub type Pretr64 = model::Pretr<f64>;
