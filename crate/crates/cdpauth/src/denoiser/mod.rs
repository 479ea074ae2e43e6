//! The conditional noise predictor and its training machinery.

pub mod checkpoint;
pub mod model;
pub mod score;
pub mod train;

pub use checkpoint::{DenoiserCheckpoint, DenoiserCheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use model::{
    pixels_to_batch, CondFeatures, CondSource, Denoiser, DenoiserConfig, DenoiserPredictor,
    IdentityMode,
};
pub use score::score_classes;
pub use train::{loss_and_grad, train, Hyperparams, TrainBatch, TrainReport};
