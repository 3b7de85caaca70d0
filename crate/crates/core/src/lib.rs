//! Skin-lesion segmentation with fully convolutional networks.

pub mod catalog;
pub mod error;
pub mod harness;
pub mod labels;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod surgery;
pub mod synthetic;
pub mod trainer;
pub mod weights;
pub mod zoo;

pub use error::{Error, Result};
