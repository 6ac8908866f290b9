//! AdamW with decoupled weight decay, a warmup + cosine schedule, and
//! deterministic training and evaluation loops over any [`Objective`].

mod optim;
mod schedule;
mod train;

pub use optim::{adamw_step, clip_global_norm, decays, global_norm, AdamWConfig, Moments, OptimizerState};
pub use schedule::{lr_at, ScheduleSpec};
pub use train::{
    batch_gradients, evaluate, train_loop, train_loop_with, BatchSource, Evaluation, LossLog, Objective,
    StepRecord, TrainConfig, TrainOutcome,
};
