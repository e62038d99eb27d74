//! Forward operators recorded on a [`crate::graph::Graph`], each with its
//! reverse-mode rule.

pub mod basic;
pub mod cam;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod metric;
pub mod norm;
pub mod pool;
pub mod resize;

pub use metric::{MapMetric, SsimConfig};
pub use norm::{BnMode, RunningStats};
pub use resize::resize_bilinear;
