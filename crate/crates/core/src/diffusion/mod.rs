//! Mask-modulated residual diffusion: schedule, forward marginal, reverse
//! posterior, the conditional noise predictor and its LR encoder, training
//! and the T-step sampler.

mod encoder;
mod process;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use encoder::{encode_lr, init_encoder, pretrain_encoder};
pub use process::{forward_step, posterior_step, q_marginal_variance, q_sample, residual};
pub use sampler::{sample_sr, sample_sr_with, ConditionBundle, NoisePredictor, SrModels, StepNoise, UNet};
pub use schedule::{make_schedule, DiffusionSchedule};
pub use train::{prepare_examples, train_diffusion, DiffusionExample, Guidance, PreparedExample};
pub use unet::{init_noise_predictor, predict_noise, time_embedding, TIME_EMBED_DIM};

/// Current position of the reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_t: crate::grid::ImageGrid,
    pub t: usize,
}
