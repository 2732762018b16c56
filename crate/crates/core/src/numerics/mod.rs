//! Deterministic float64 tensor kernels and the small conv net built on them.

mod checkpoint;
mod conv;
mod gradcheck;
mod loss;
mod model;
mod pool;
mod sgd;
mod tensor;

pub use checkpoint::{read_arrays, write_arrays, ArrayFile, Checkpoint};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGeometry, ConvGrads, ConvLayer};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use loss::{softmax, softmax_cross_entropy};
pub use model::{
    backward, forward, forward_with_hook, loss_and_grad, ActivationHook, ConvLayerSpec,
    ConvNetConfig, ConvParams, ForwardPass, ModelParams,
};
pub use pool::{global_pool, global_pool_backward, PoolCache, PoolMode};
pub use sgd::{sgd_step, Sgd};
pub use tensor::Tensor;
