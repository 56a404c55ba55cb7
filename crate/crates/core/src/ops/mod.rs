//! Forward and backward kernels shared by every executor.

mod conv;
mod elementwise;
mod loss;
mod matrix;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_dims, conv2d_macs, ConvGeom, ConvGrads};
pub use elementwise::{
    activation, activation_backward, add, broadcastable, mul_broadcast, mul_broadcast_backward, reduce_to, scale,
    sigmoid_scalar, Activation,
};
pub use loss::{heatmap_mse, heatmap_mse_backward};
pub use matrix::{matmul, matmul_backward, matmul_dims, softmax_rows, softmax_rows_backward, transpose_hw};
pub use norm::{
    batchnorm_eval, batchnorm_eval_backward, batchnorm_train, batchnorm_train_backward, channel_stats, update_running,
    BnCache, BnGrads, BN_EPS, BN_MOMENTUM,
};
pub use pool::{
    channel_max, channel_mean, channel_mean_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    global_max_pool, maxpool2x2, maxpool2x2_dims, scatter_to_indices, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward,
};
