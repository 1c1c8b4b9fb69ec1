//! LoRA Dropout laboratory.
//!
//! Low-rank adapters whose input and output dimensions are masked with
//! Bernoulli dropout, trained with a multi-instance objective and evaluated
//! with a test-time dropout ensemble, together with numerical probes of the
//! sparsity-regularization view of that dropout (masked-norm identity,
//! ensemble Jensen gap, pointwise hypothesis stability, generalization
//! gap versus dropout rate).
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! experiment harness runs in `f64`.

pub mod ensemble;
pub mod error;
pub mod harness;
pub mod lora;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model64 = training::Model<f64>;
pub type LoraLayer64 = lora::LoraLayer<f64>;
pub type AdaLoraLayer64 = lora::AdaLoraLayer<f64>;
pub type Dataset64 = harness::data::Dataset<f64>;
