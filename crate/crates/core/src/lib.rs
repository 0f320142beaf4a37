//! ADSRNet: a heterogeneous parallel CNN for single-image super-resolution,
//! built on a small reverse-mode autograd engine.
//!
//! The upper branch stacks heterogeneous blocks (dilated, dynamic and plain
//! conv+ReLU units with a residual connection), the lower branch is a
//! symmetric 16-layer stack with mirrored skips. Their features are fused and
//! upsampled by a sub-pixel construction block.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Fusion, Model, ModelConfig, ParameterSet, Variant};
pub use tensor::{Scalar, Shape, Tensor};
pub use train::{TrainConfig, Trainer};
