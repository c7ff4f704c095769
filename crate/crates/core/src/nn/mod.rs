//! Layers with explicit forward/backward pairs. Every forward returns the cache its
//! backward consumes.

mod conv;
mod linear;
mod param;
mod pool;
mod softmax;

pub use conv::{conv2d, conv2d_backward, conv_output_size, Conv2dCache};
pub use linear::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward,
    FcCache, GapCache,
};
pub use param::{AdamConfig, ParamTensor};
pub use pool::{max_pool, max_pool_backward, pool_cell, MaxPoolCache};
pub use softmax::{
    cross_entropy, cross_entropy_backward, softmax2d, softmax2d_backward, softmax_in_place,
    CrossEntropyCache, SoftmaxCache,
};

/// ReLU backward: passes `grad` where the forward *output* was positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}
