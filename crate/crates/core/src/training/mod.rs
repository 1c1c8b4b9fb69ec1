//! Models, objectives, optimizers and the training loop.

mod model;
mod objective;
mod optim;
mod trainer;

pub use model::{AdapterKind, BoundParams, HeadMode, Layer, Model, ModelSpec};
pub use objective::{explicit_regularized_loss, multi_instance_loss, sparsity_penalty, task_loss, Batch};
pub use optim::{sgd_step, Optimizer, OptimizerKind};
pub use trainer::{train, EpochRow, RunOptions, RunRecord, TrainConfig, TrainMode, DIVERGENCE_THRESHOLD};
