//! Training orchestration: the optimizer and schedule, checkpointing,
//! the pretraining and fine-tuning loops, and gradient verification.

pub mod checkpoint;
pub mod finetune;
pub mod gradcheck;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use finetune::{classifier_forward, predict, run_finetune, ClassifierTrace, FinetuneOutcome};
pub use gradcheck::{
    gradient_check, gradient_check_all, ComponentCheck, COMPONENTS, GRADCHECK_TOL,
};
pub use optim::{schedule_lr, AdamW};
pub use pretrain::{
    build_teacher, init_pretrain_params, pretrain_step, run_pretrain, PretrainOutcome,
};
