//! Dynamic convolution on a small, dependency-light tensor stack.
//!
//! A dynamic convolution layer stores a bank of `g_t` fixed kernels per
//! output channel. A coefficient predictor (global pooling, one or two linear
//! layers, sigmoid) looks at the block input and emits one weight per bank
//! member; the layer then either fuses the bank into one kernel per sample
//! (inference) or convolves with the whole bank and fuses the feature maps
//! (training). Both paths compute the same function because convolution is
//! linear in the kernel.
//!
//! Modules:
//! - [`tensor`]: dense tensors, convolution, pooling, linear, activations, batch norm.
//! - [`dynconv`]: coefficient prediction, kernel fusion, the two execution paths.
//! - [`training`]: reverse-mode autodiff, SGD with cosine decay, label-smoothed loss.
//! - [`arch`]: block/network specs, model builders, FLOPs accounting.
//! - [`analysis`]: Pearson correlation histograms and the noise-decomposition oracle.
//! - [`io`]: model and dataset file formats, synthetic data, the fusion benchmark.

pub mod analysis;
pub mod arch;
pub mod dynconv;
pub mod error;
pub mod io;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, DType, Scalar, Tensor};
