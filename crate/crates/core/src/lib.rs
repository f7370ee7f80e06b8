//! Backpropagation-free local learning for convolutional networks.
//!
//! Every block is trained against its own goodness objective: a bi-axis
//! covariance goodness (per-channel and cross-channel region energies at two
//! spatial scales) mapped to class logits by a learnable readout. Blocks are
//! separated by detach boundaries, optionally grouped into hybrid blocks of
//! `m` layers trained jointly, and their per-layer logits are combined by a
//! softmax-weighted fusion head.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod goodness;
pub mod memmodel;
pub mod meter;
pub mod ops;
pub mod optim;
pub mod run;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use autodiff::{GradientGroup, Gradients, Param, ParamId, ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use meter::MemoryMeter;
pub use tensor::{Precision, Shape4, Tensor4};
