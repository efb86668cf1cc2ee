//! Dense tensors, reverse-mode autodiff, layers, policy distributions,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod dist;
mod graph;
pub mod layers;
pub mod optim;
mod param;
mod tensor;

pub use graph::{huber, logsumexp, Gradients, Graph, Var};
pub use layers::{Activation, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{GroupRates, Optimizer, OptimizerKind};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
