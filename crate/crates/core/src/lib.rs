//! Recurrent language models conditioned on non-linguistic context.

pub mod context;
pub mod corpus;
pub mod dd;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = models::Model<f64>;
pub type Parameters = models::Parameters<tensor::Tensor<f64>>;
pub type Checkpoint = training::Checkpoint<f64>;
