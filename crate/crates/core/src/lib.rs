//! Point-cloud recognition with CT-blocks: a local convolution branch and a
//! global offset-attention branch that exchange features at every stage,
//! built on a small reverse-mode autodiff core.
//!
//! Start with [`networks::ClassificationModel`] or
//! [`networks::SegmentationModel`], train them with [`training::train`],
//! and score them with [`metrics`]. The `examples/` directory has one
//! runnable program per capability.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod ct_block;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
