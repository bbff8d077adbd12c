//! Two-forward co-segmentation training, evaluation, checkpoints and the
//! component ablation harness.

mod ablation;
mod model;
mod train;

pub use ablation::{ablation_configs, format_table, run_ablation, AblationRow, ABLATION_ROWS};
pub use model::{CoSegForward, Model, Prediction};
pub use train::{evaluate, load_checkpoint, load_weights, save_checkpoint, Adam, EpochSummary, StepRecord, TrainState, Trainer};
