//! Forward and backward kernels on plain tensors. The tape in
//! [`crate::autodiff`] wires these together.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod upsample;

pub use conv::{Conv2dParams, DeconvParams};
pub use loss::Labels;
pub use norm::BatchNormConfig;
