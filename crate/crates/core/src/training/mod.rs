//! Losses, optimizer, synthetic data and the episodic training loop.

mod adamw;
mod data;
mod loss;
mod trainer;

pub use adamw::{AdamWConfig, AdamWState};
pub use data::{
    gen_synthetic, sample_few_shot, ClassData, DataConfig, Episode, ImageSample, Item, Split, SyntheticDataset,
    TEMPLATE,
};
pub use loss::{ce_loss, ce_on_tape, logits_on_tape, reg_losses, reg_on_tape, total_loss, total_on_tape};
pub use trainer::{
    accuracy, build_loss, evaluate, feature_drift, log_csv, loss_and_gradients, train, Batch, LossVars, StepLog,
    TrainedState, TrainingConfig, LOG_HEADER,
};
