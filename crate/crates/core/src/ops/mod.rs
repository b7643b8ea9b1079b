//! Dense numerical kernels with forward and backward passes.
//!
//! `conv2d_forward` lowers to patch matrices (im2col) for speed;
//! `conv2d_reference` is the normative quadruple-loop definition the fast
//! path is tested against.

mod activation;
mod concat;
mod conv;
mod fc;
mod pool;

pub use activation::{relu_backward, relu_forward, softmax_pair_backward, softmax_pair_forward};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_reference, dilate_kernel};
pub use fc::{fc_backward, fc_forward};
pub use pool::{maxpool_backward, maxpool_forward, ArgmaxMap};
