//! Experiment engine: configs, training with train-only hiding, full-input
//! evaluation, and multi-seed ablation suites.

mod config;
mod evaluate;
mod suite;
mod train;

pub use config::{
    Dataset, DatasetRef, ExperimentConfig, FillConfig, HidingConfig, Task, DEFAULT_IMAGE_THRESHOLD,
    DEFAULT_TEMPORAL_THRESHOLD,
};
pub use evaluate::{evaluate, predict, EvalSettings, Evaluation, Prediction, TrainedModel};
pub use suite::{run_suite, Budget, MeanSd, RunResult, SuiteConfig, SuiteReport, SuiteRow, VariantSpec};
pub use train::{
    pipeline_from_checkpoint, train, validation_stats, EpochLog, InputPipeline, Phase, TrainOutcome,
    TransformAudit,
};
