//! Multi-scale pooling fully convolutional network for left-ventricle
//! segmentation in short-axis cardiac MR slices.

pub mod arch;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
