//! Attention UNet with atrous spatial pyramid pooling for binary
//! segmentation of 2-D image slices, plus its three baselines (UNet,
//! Attention UNet, Attention UNet with pyramid pooling).
//!
//! Everything runs on a small CPU tensor library with reverse-mode
//! automatic differentiation ([`autodiff`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelSpec, Network, Variant};
pub use tensor::{DType, Element, Tensor};
