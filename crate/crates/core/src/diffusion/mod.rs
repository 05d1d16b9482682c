//! Noise schedules, closed-form forward diffusion, the ε-predictor, its
//! training loop and the single-step dissolving transformation.

mod checkpoint;
mod ops;
mod schedule;
mod train;
mod unet;

pub use checkpoint::{
    dissolve, reverse_step, DenoiserCheckpoint, ImageShape, TrainMeta, DENOISER_FORMAT_VERSION,
    MANIFEST_FILE, WEIGHTS_FILE,
};
pub(crate) use checkpoint::check_format_version;
pub use ops::{
    dissolve_unclamped, dissolve_with, q_sample, reverse_step_with, sample_with, NoisePredictor,
};
pub use schedule::{build_schedule, DiffusionSchedule, ScheduleKind, ScheduleSpec};
pub use train::{l1_loss, train_denoiser, train_denoiser_with, DiffusionTrainConfig, DiffusionTrainLog};
pub use unet::{timestep_embedding, UNet, UNetConfig};
