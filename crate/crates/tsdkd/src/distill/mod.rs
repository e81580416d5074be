//! Training orchestration: configuration, the optimizer, pretraining, and
//! the distillation loop.

pub mod config;
mod optim;
mod trainer;

pub use config::{Objective, TrainConfig, CONFIG_KEYS};
pub use optim::{cosine_lr, AdamW};
pub use trainer::{
    mix_seed, pretrain, run_distillation, task_datasets, train_step, BatchSummary,
    DistillArtifacts, MetricsRecord, ModelRole, RunRecord,
};
