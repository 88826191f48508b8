//! Objectives, likelihood bounds, checkpoints and the training loop.

mod checkpoint;
mod loss;
mod nelbo;
mod tabular_fit;
mod trainer;

pub use checkpoint::{AnyModel, Checkpoint, CheckpointHeader, OptimizerState, RngState, TensorEntry, CHECKPOINT_FORMAT};
pub use loss::{
    ce_graph, ce_loss, dse_batch_loss, dse_graph, dse_loss, dse_targets, DseBatchLoss, DseTargets, LossMode,
};
pub use nelbo::{nelbo, nelbo_per_token, perplexity_aggregate, BoundEstimate, NelboConfig, PplOrder};
pub use tabular_fit::{expected_dse_coefficients, fit_tabular, TabularFit};
pub use trainer::{lr_at, StepLog, TrainConfig, Trainer};
