//! Binary convolutional networks whose weights are latently parametrized by
//! real-valued matrix and tensor decompositions.
//!
//! Training keeps only the real factors (direct, layer-wise SVD, layer-wise
//! Tucker, or one Tucker decomposition shared by a group of identically shaped
//! layers). Every step reconstructs the weights, binarizes them with `sign`,
//! scales them per filter and back-propagates into the factors through a
//! straight-through estimator. Inference consumes only the frozen, bit-packed
//! reconstruction and runs XNOR + popcount convolutions.
//!
//! Module map:
//! - [`tensor`]: dense tensors, unfolding, n-mode products, SVD, Tucker reconstruction
//! - [`latent`]: weight parametrizations, initialization, reconstruction and their adjoints
//! - [`binarize`]: sign, per-filter scaling, straight-through gradients
//! - [`train`]: a small reverse-mode engine for binary CNNs
//! - [`bitkernel`]: bit packing, XNOR convolution, frozen model format, benchmark
//! - [`harness`]: configuration, datasets, checkpoints, metrics, experiments

pub mod binarize;
mod codec;
pub mod bitkernel;
pub mod error;
pub mod harness;
pub mod latent;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
