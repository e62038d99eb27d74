//! Explanation-guided training of convolutional classifiers.
//!
//! Grad-CAM maps are computed batch-wise during training and pulled toward
//! per-class prototype images with L1, L2, or SSIM distances. The crate
//! carries its own small reverse-mode differentiation engine ([`graph`],
//! [`ops`]) so that gradient queries to intermediate activations are a
//! first-class operation.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod losses;
pub mod models;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod prototypes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
