//! Desk-scale transformer laboratory: outlier-feature metrics, the Outlier
//! Protected block, diagonal and rotated preconditioners, and int8 fake
//! quantization.
//!
//! Numeric code is generic over [`Scalar`] (`f64` or `f32`); the aliases
//! below fix the default double-precision types.

pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    ActivationTap, Batch, Model, ModelConfig, ParameterStore, TapSite,
};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Reduction, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Params64 = ParameterStore<f64>;
pub type Params32 = ParameterStore<f32>;
