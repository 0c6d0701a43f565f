//! Class- and pose-conditioned denoising diffusion on small RGB images:
//! noise schedule, residual MLP noise predictor, training, guidance and a
//! deterministic DDIM sampler.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{
    load_denoiser, load_trainer, read_sidecar, save_denoiser, save_trainer, sidecar_path, DenoiserSidecar, ScheduleSpec,
    TrainingState, DEFAULT_GUIDANCE, DENOISER_FORMAT, DENOISER_FORMAT_VERSION,
};
pub use model::{embed_condition, Condition, ConditionEmbedding, Denoiser, DenoiserConfig, EpsPredictor};
pub use sample::{guided_eps, initial_noise, sample, sample_batch, sample_signed, CountingPredictor, SampleRequest};
pub use schedule::{cfg_eps, ddim_step, forward_noise, make_schedule, predict_x0, NoiseSchedule};
pub use train::{
    denoising_loss, noise_batch, step_rng, train_step, LossRecord, NoisedBatch, TrainConfig, TrainItem, Trainer, TrainingSet,
};
