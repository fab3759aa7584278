//! Dense-tensor computation graph with reverse-mode gradients, Adam, and
//! finite-difference gradient checking. All arithmetic is `f64`.

mod graph;
pub mod gradcheck;
pub mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Mask, NodeId, OpKind, LAYER_NORM_EPS};
pub use params::{AdamConfig, Gradients, Init, ParamId, ParameterStore, WEIGHT_STD};
pub use tensor::Tensor;
