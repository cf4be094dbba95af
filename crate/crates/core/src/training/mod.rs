//! Loss, optimizer, schedule, augmentation, checkpoint averaging and
//! persistence, and the training loop that ties them together.

pub mod adam;
pub mod augment;
pub mod average;
pub mod checkpoint;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use augment::{retention_marginal, sample_patch_subset};
pub use average::average_checkpoints;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{loss_value, pose_loss, LossWeights};
pub use schedule::lr_at;
pub use trainer::{
    epoch_checkpoint_name, train, train_from, Sample, StepRecord, TrainConfig, TrainReport, AVERAGED_CHECKPOINT,
};
