//! Optimizer, schedule, checkpoints, loss curves and checkpoint alignment.

mod checkpoint;
mod curve;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use curve::{
    align_checkpoints, default_target, AlignedRun, Alignment, LossCurve, DEFAULT_ALIGN_THRESHOLD,
};
pub use optim::{adam_step, decays, lr_at, AdamState, TrainConfig};
pub use trainer::{checkpoint_path, mean_loss, StepStats, TrainSummary, Trainer};
