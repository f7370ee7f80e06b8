//! Forward and backward kernels for the fixed op set.
//!
//! Every kernel here is a pure function of its inputs. The recorded
//! reverse pass in [`crate::autodiff`] composes them.

mod conv;
mod dense;
mod elementwise;
mod gemm;
mod norm;
mod partition;
mod pool;
mod region;

pub use conv::{channel_project_backward, channel_project_forward, conv2d_backward, conv2d_forward, ConvGrads};
pub use dense::{linear_backward, linear_forward, softmax_cross_entropy, softmax_rows, LinearGrads};
pub use elementwise::{dropout_mask, relu, relu_backward};
pub use norm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, rms_norm_backward, rms_norm_forward, BatchNormTrace,
    BN_EPS, RMS_NORM_EPS,
};
pub use partition::{region_partition, Region};
pub use pool::{
    avg_pool_2x2, avg_pool_2x2_backward, global_avg_pool, global_avg_pool_backward, rms_pool, rms_pool_backward,
    RMS_POOL_EPS,
};
pub use region::{region_energy, region_energy_backward};
