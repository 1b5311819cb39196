//! Small-footprint keyword spotting: a temporal-convolution encoder with an
//! attention decoder, pretrained by local-global contrastive learning and by
//! distillation from precomputed speech-model embeddings.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Tcanet<f32>;
pub type Model64 = model::Tcanet<f64>;
