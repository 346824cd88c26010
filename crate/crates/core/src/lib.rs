//! Sequential recommendation laboratory.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod review;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
