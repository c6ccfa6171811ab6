//! Band-group convolutional super-resolution for hyperspectral cubes.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`ops`]: NHWC tensors and the convolution kernels.
//! - [`tape`]: reverse-mode differentiation over those ops.
//! - [`loss`] and [`metrics`]: training objective and evaluation.
//! - [`data`]: cube I/O, band grouping, degradation, patch protocol.
//! - [`model`]: the network, its initialization and checkpoints.
//! - [`train`]: Adam, the training loop and cube-level evaluation.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, CubeError, Error, Result};
pub use tensor::{DType, Scalar, Shape4, Tensor4};
