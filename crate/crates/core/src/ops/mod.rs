//! The neural operations the model zoo composes.

mod activation;
mod arith;
mod conv;
mod norm;
mod pool;

pub use activation::{dropout, relu, softmax_channels, Mode};
pub use arith::{add, mul, scale, sum_all};
pub use conv::{
    bilinear_deconv_init, bilinear_kernel, bilinear_kernel_for_stride, conv2d, depthwise_conv2d,
    transposed_conv2d, upsample_fixed, ConvParams,
};
pub use norm::{
    batch_norm_eval, batch_norm_train, local_contrast_normalize, update_running_stats, BatchStats,
};
pub use pool::{max_unpool2x2, maxpool2x2, PoolIndices};
