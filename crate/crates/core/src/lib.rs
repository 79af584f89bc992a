//! DCSAU-Net segmentation: tensors with reverse-mode differentiation,
//! PFC and CSA blocks, the assembled network, an analytic cost model, and
//! the data, metric and training plumbing around them.

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod scalar;
pub mod selftest;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Variant};
pub use tensor::{Mask, Shape};

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph = autograd::Graph<f32>;
pub type Model = model::DcsauNet<f32>;
pub type Model64 = model::DcsauNet<f64>;
