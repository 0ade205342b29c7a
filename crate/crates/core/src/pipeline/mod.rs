//! Distillation runs: configuration, synthetic tasks, the training loop
//! and evaluation.

pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use config::{DistillerConfig, LossWeights, StudentShape, CONFIG_KEYS, PRESETS};
pub use data::{ClassificationTask, TaggingTask, TaskData, TaskMeta};
pub use eval::{distillation_ratio, evaluate, evaluate_report, span_f1, EvalReport};
pub use train::{
    distill, init_student, prepare_batch, total_objective, train_supervised, train_teacher, DistillOutcome,
    DistillState, Objective, ObjectiveTerms, PreparedBatch, RunRecord, SupervisedSettings,
};
