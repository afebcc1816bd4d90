//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, the Adam optimizer and binary checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{
    backprop, guided_backprop_gradients, relu, softmax_rows, GradientTape, Graph, Mode, NodeId,
    ReluRule,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, RunningStats};
pub use tensor::{conv1d, dense, Tensor};
