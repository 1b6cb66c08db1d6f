//! Universal few-shot segmentation: correlation pyramids between a query and
//! its support, refined and aggregated by a trainable network that also
//! consumes a text-space guidance vector, so one architecture serves image,
//! mask, box and text guidance.

pub mod aggregation;
pub mod archive;
pub mod autodiff;
pub mod correlation;
pub mod decoder;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod hscu;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patterns;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{FssError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::UniFss<f32>;
pub type Model64 = model::UniFss<f64>;
pub type StubEncoder32 = encoder::ProjectionEncoder<f32>;
pub type StubEncoder64 = encoder::ProjectionEncoder<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
