//! Reverse-mode differentiation and the SGD training recipe.

mod graph;
mod loss;
mod optim;
mod params;
mod trainer;

pub use graph::{Graph, Mode, NodeId};
pub use loss::{argmax_rows, smoothed_cross_entropy, smoothed_cross_entropy_grad, smoothed_target};
pub use optim::{sgd_step, CosineSchedule, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use trainer::{evaluate, train, StepLog, TrainConfig};
