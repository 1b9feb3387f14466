//! Dense kernels, the gradient tape and transformer building blocks.

pub mod gradcheck;
pub mod kernels;
pub mod matrix;
pub mod nn;
pub mod params;
#[cfg(test)]
pub(crate) mod scalar;
pub mod tape;

pub use kernels::{dropout, layer_norm, linear, softmax_rows, LayerNormParams, Mode};
pub use matrix::DenseMatrix;
pub use nn::{attention, feed_forward, AttentionParams, FfnParams, ForwardCtx, HeadScale};
pub use params::{ParamId, ParamStore};
pub use tape::{GradTape, Gradients, GroupReduce, Var};
