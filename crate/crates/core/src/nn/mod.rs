//! Layer kernels: convolution, batch normalization, activations, max
//! pooling, nearest upsampling and route. Every kernel is a pure function of
//! its inputs and has a matching backward pass.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod pool;
pub mod resample;

pub use activation::{activate, activate_backward, Activation, DEFAULT_LEAKY_SLOPE};
pub use batchnorm::{
    batch_norm, batch_norm_backward, batch_norm_train, batch_norm_train_backward, BatchNormCache, BatchNormGrads,
    BatchNormParams, BatchStats,
};
pub use conv::{conv2d, conv2d_backward, conv_out_hw, ConvGrads, ConvParams};
pub use pool::{max_pool, max_pool_backward, max_pool_output_shape, max_pool_with_argmax};
pub use resample::{route, route_backward, route_output_shape, upsample2x, upsample2x_backward};
