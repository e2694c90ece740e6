//! Weighted cross-entropy, Adam, base training and head-only fine-tuning.

mod adam;
mod loss;
mod trainer;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use loss::{class_weight_map, cross_entropy_logit_grad, weighted_cross_entropy, ClassWeights, PROB_CLIP};
pub use trainer::{finetune, train_base, write_log, LogRecord, TrainConfig, TrainOutcome, BASE_ITERATIONS, FINETUNE_ITERATIONS};
