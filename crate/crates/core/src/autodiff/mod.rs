//! Dense tensors and reverse-mode differentiation for a fixed set of layer
//! kinds: Conv2D, ReLU, MaxPool2D, AdaptiveAvgPool2D, Linear and LogSoftmax.
//!
//! Image tensors are NCHW, row-major.

mod gemm;
pub mod graph;
pub mod layer;
pub mod tensor;

pub use graph::{
    backward_range, finite_difference_check, forward_trace, network_backward, network_forward,
    param_gradients, predict, rescale_multiplier, BackwardRule, ForwardTrace, Gradients,
    LayerGraph, RESCALE_EPSILON,
};
pub use layer::{layer_forward, Conv2d, Layer, LayerKind, Linear, ParamGrads};
pub use tensor::Tensor;
