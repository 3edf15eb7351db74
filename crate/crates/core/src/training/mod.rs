//! Optimization: Adam with warmup/decay schedules, and the two training
//! phases (domain fusion and task fine-tuning) for each method variant.

mod adam;
mod pipeline;
mod schedule;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState, BETA1, BETA2, EPSILON};
pub use pipeline::{
    argmax, evaluate_accuracy, inherit_tensors, mlm_loss, predict, pretrain_backbone, run_method,
    run_method_on, train_domain_fusion, train_task, History, HistoryRow, MethodVariant,
    PhaseReport, PretrainSpec, RunPlan, RunResult, TargetData, TrainHyper, UdaDatasets,
};
pub use schedule::{Schedule, DEFAULT_WARMUP};
