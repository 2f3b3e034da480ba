// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bottleneck;
pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod nn;
pub mod patchify;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{LabelMap, Tensor};

pub type UNetmerF32 = model::UNetmer<f32>;
pub type UNetmerF64 = model::UNetmer<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
