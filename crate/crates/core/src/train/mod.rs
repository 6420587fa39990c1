//! Two-stage training: stage 1 fits the feature extractor with the direct
//! classifier, stage 2 freezes it and fits the graph (or direct) head.

mod config;
mod optimizer;
mod pipeline;

pub use config::RunConfig;
pub use optimizer::{OptimizerConfig, Sgd};
pub use pipeline::{
    build_adjacency, evaluate_model, extract_all, predict_all, run_ablation, run_ablation_from, run_stage1, run_stage2,
    training_weights, AblationReport, EpochRecord, StageOutput, TrainState,
};
