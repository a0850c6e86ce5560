//! Training the affinity and objectness heads against frozen teachers.

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use augment::Augmentations;
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use loss::{
    correlation_bce, correlation_loss, correlation_loss_and_grad, objectness_bce, objectness_loss,
    objectness_loss_and_grad, Q_CLAMP,
};
pub use trainer::{train, EpochMetrics, EpochReport, TrainConfig, TrainInputs, TrainSample};
