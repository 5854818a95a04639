//! Pretraining, token-selective fine-tuning, evaluation and gradient checks.

mod config;
mod evaluate;
mod finetune;
mod gradcheck;
mod optim;
mod pretrain;

pub use config::*;
pub use evaluate::{evaluate, EvalReport, ModuleEval};
pub use finetune::{
    effective_hyper, finetune, finetune_data, lr_multiplier, mean_std_pop, pretrain_data, FinetuneOptions, FinetuneRun,
    ModuleStep, ModuleSummary, RunSummary, StepRecord,
};
pub use gradcheck::{
    gradcheck, relative_error, threshold_gradient_literal, CaseReport, GradCheckReport, GradCheckSettings, TensorCheck,
    MAX_HIDDEN, MAX_SEQ_LEN,
};
pub use optim::AdamW;
pub use pretrain::{backbone_accuracy, load_or_pretrain, pretrain, pretrain_from, PretrainReport};
