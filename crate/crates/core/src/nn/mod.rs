//! Minimal differentiable engine: NCHW tensors, convolutions, activations, losses and SGD.

pub mod activation;
pub mod checkpoint;
pub mod conv;
pub mod loss;
pub mod sgd;
pub mod tensor;

pub use activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub use checkpoint::Checkpoint;
pub use conv::{conv2d_backward, conv2d_backward_params, conv2d_forward, ConvLayer, Param};
pub use loss::{focal_element, focal_loss, smooth_l1_element, FocalParams};
pub use sgd::{sgd_step, SgdConfig};
pub use tensor::{depth_to_space, space_to_depth, Scalar, Tensor};
