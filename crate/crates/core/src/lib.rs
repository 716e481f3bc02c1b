//! Training flexible networks (early-exit and slimmable) with in-place
//! knowledge distillation between their sub-models.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices. The command-line tool runs in
//! `f64`.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type ParamStoreF64 = nn::ParamStore<f64>;
pub type ParamStoreF32 = nn::ParamStore<f32>;
pub type DatasetF64 = data::Dataset<f64>;
pub type DatasetF32 = data::Dataset<f32>;
/// Exact teacher weights of the multi-teacher strategy.
pub type TeacherWeight = num_rational::Ratio<u64>;
