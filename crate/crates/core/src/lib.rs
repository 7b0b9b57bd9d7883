// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod binarization;
pub mod compression;
pub mod error;
pub mod graph;
pub mod parallel;
pub mod pruning;
pub mod quantization;
pub mod sparsity;
pub mod tensor;
pub mod train;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
