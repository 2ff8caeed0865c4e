//! Dense tensors and the hand-written forward/backward kernels.

pub mod gradcheck;
mod layer;
mod network;
pub mod ops;
mod optim;
mod scalar;
mod tensor;

pub use layer::LayerSpec;
pub use network::{
    backward_pass, forward_masked, forward_pass, infer, infer_masked, ForwardCache, Gradients,
};
pub use ops::{argmax_rows, softmax_cross_entropy};
pub use optim::{OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use tensor::Tensor;
