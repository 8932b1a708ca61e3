//! Minimal differentiable-programming substrate: tensors on a tape, parameter
//! sets, optimizers and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use graph::{avg_pool2, softmax_channels, BatchStats, Gradients, Graph, Var};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use params::{he_normal, Bound, ParamSet};
