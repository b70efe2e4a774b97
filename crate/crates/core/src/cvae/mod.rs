//! Conditional VAEs over body features given a scene view: the one-stage
//! (S1) architecture with a 32-dim latent, and the two-stage (S2)
//! architecture that factorizes the global translation from the remaining
//! features.

mod model;
mod scene;
mod train;

pub use model::{
    decode_s1, decode_s2, latent_traverse, load_model, new_model, s1_forward, s2_forward, sample,
    save_model, scene_code_values, Arch, CvaeModel, ModelConfig, S1Forward, S2Forward,
};
pub use scene::{encode_scene, SceneTensor, SCENE_SIZE};
pub use train::{
    alpha_kl_at, hs_start_epoch, train, EpochRecord, RoomContext, TrainData, TrainItem,
    TrainSchedule,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Checkpoint(#[from] crate::diff::CheckpointError),
    #[error("checkpoint does not contain parameter '{0}'")]
    MissingParam(String),
    #[error("checkpoint parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("bad model metadata: {0}")]
    BadMeta(String),
    #[error("training diverged at epoch {epoch}: {reason}; model restored to last finished epoch")]
    Diverged { epoch: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}
