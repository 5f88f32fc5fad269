//! AdamW, cosine schedule, batch assembly and the staged pipeline.

pub mod data;
pub mod optim;
pub mod pipeline;

pub use data::{
    assemble_batches, batches_per_epoch, resolve_rows, BatchStream, CaptionedPair, EmbeddingBank, LabeledPair,
    Splits, TaskKey, TaskRows,
};
pub use optim::{adamw_step, adamw_update, cosine_lr, AdamConfig, OptimizerState, ScalarMoments};
pub use pipeline::{run_pipeline, run_stages, train_stage, MetricRecord, StagePlan, TrainConfig};
