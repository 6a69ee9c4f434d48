//! Dense arrays, reverse-mode differentiation and the optimizer.

pub mod attention;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use attention::{scaled_dot_attention, AttnGeometry, AttnMask, MASK_SENTINEL};
pub use graph::{Counters, Graph, Var};
pub use layers::{layer_norm, multi_head_attention, MhaWeights, LN_EPS};
pub use optim::{adam_step, warmup_learning_rate, AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
