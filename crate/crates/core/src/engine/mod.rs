//! Training loop, evaluation orchestration, and checkpointing.

mod checkpoint;
mod optimizer;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, SCHEMA_VERSION};
pub use optimizer::Adam;
pub use trainer::{
    evaluate, predict_scores, preprocess_sample, roi_clahe, train, LogRecord, TrainOutcome,
};
