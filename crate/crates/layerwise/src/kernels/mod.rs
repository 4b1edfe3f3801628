//! Deterministic forward and backward kernels for every primitive the
//! networks use. All kernels are pure functions over immutable inputs and
//! safe to invoke concurrently; summation order within any single output
//! element is fixed.

mod batchnorm;
mod conv;
mod dense;
mod pointwise;
mod pool;
mod shuffle;
mod softmax;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnMode};
pub use conv::{conv2d, conv2d_backward, conv2d_backward_params, conv_out_len};
pub use dense::{linear, linear_backward};
pub use pointwise::{relu, relu_backward, relu_in_place};
pub use pool::{
    avg_pool2, avg_pool2_backward, avg_quadrants, avg_quadrants_backward, max_pool2,
    max_pool2_backward,
};
pub use shuffle::{
    invertible_downsample, invertible_downsample_channel_order, invertible_upsample,
    CHANNEL_ORDER_TAG,
};
pub use softmax::{softmax_cross_entropy, softmax_probs};
