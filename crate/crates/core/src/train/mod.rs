//! Contrastive pretraining, supervised fine-tuning and their building blocks.
//!
//! Pretraining sorts each batch as `(a1, a2, b1, b2, ...)`, two augmented
//! views per source, so rows `2k` and `2k + 1` are positives for the loss.

mod loss;
mod metrics;
mod optim;
mod run;

pub use loss::{cross_entropy, nt_xent, nt_xent_terms, NtXentMode, DEFAULT_TAU, NORM_TOL};
pub use metrics::{accuracy, argmax_rows, knn_predict, knn_validate, macro_f1};
pub use optim::{adamw_update, clip_grad_norm, lr_at, AdamW, AdamWConfig, TrainSchedule};
pub use run::{
    encode_all, evaluate, finetune, fit_frames, labels_of, pretrain, Evaluation, FinetuneOptions,
    FinetuneReport, KnnSet, MetricLog, PretrainOptions, PretrainReport, DEFAULT_CLIP_NORM,
    FINETUNE_HEADER, PRETRAIN_HEADER,
};
