//! Numerical replay of schedules on a toy model, checked against
//! single-process SGD.

mod exec;
mod model;

pub use exec::{execute, run_iteration, samples_needed, sequential_micro_batch_sgd, ExecOrder, ExecReport};
pub use model::{check_gradients, sequential_sgd, Activation, Batch, Matrix, ToyModel};
