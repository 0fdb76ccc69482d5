//! Optimization: pre-training and fine-tuning loops, schedule, clipping,
//! EMA, adversarial and mixup strategies, checkpoints.

mod checkpoint;
mod config;
mod ema;
mod finetune;
mod optim;
mod pretrain;
mod strategies;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_weights, save_checkpoint, Phase,
    TrainState, MAGIC, VERSION,
};
pub use config::{Task, Toggles, TrainConfig};
pub use ema::EmaState;
pub use finetune::{
    argmax, predict_probs, EpochMetrics, FinetuneParts, FinetuneStepLog, Finetuner, LabeledSet,
};
pub use optim::{
    accumulate, clip_gradients, global_norm, lr_at, Grads, Moments, OptState, ADAM_EPS, BETA1, BETA2,
};
pub use pretrain::{batches_per_epoch, Pretrainer, StepLog};
pub use strategies::{embedding_mixup, fgm_perturb, mixup_partner, mixup_rows, sample_lambdas};
