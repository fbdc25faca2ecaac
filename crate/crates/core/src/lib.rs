//! Data-efficient LiDAR semantic segmentation.
//!
//! A projection-based feature extractor is pretrained on a mixture of
//! datasets with dataset-conditioned normalization layers, then frozen while
//! a small inverted-bottleneck head and the per-dataset context embeddings
//! are fine-tuned on a handful of in-domain scans.

pub mod augment;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod projection;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit dense array, the default element type everywhere.
pub type DTensor = tensor::Tensor<f64>;
pub type DGraph = graph::Graph<f64>;
