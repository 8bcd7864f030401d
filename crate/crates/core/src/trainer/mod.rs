//! Supervised fine-tuning of adapter factors on a frozen base model.

mod backprop;
mod data;
mod train;


pub use backprop::{
    activation_for, example_loss, finite_difference_check, kv_rows, loss_and_grad, relative_error,
    sft_loss, AdapterParams, Dropout, GradCheck, LowRankParams, REL_ERROR_FLOOR,
};
pub use data::{
    make_synthetic_task, read_jsonl, write_jsonl, SftExample, TaskKind, TaskLayout, TaskSizes,
};
pub use train::{
    exact_match, train, write_metrics, Adam, Precision, StepMetrics, TrainConfig, TrainOutcome,
    METRICS_HEADER,
};
