//! Two-phase training, checkpoints, evaluation and inference.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod runlog;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ScenarioChoice, TrainConfig};
pub use eval::{evaluate, evaluate_oracle, infer_file, infer_image, Evaluation, Inference};
pub use runlog::{EpochRecord, LogEntry, RunLog};
pub use trainer::{prepare_data, train_two_phase, validation_scores, Model, Prediction, TrainData, TrainOutcome};
