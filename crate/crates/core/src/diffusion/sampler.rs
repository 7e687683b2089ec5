use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::encode_lr;
use super::process::posterior_step;
use super::schedule::DiffusionSchedule;
use super::train::{standard_normal_grid, Guidance};
use super::unet::predict_noise;
use crate::data::upscale;
use crate::error::{config_err, Result};
use crate::grid::ImageGrid;
use crate::nn::{NetworkParams, Tensor};
use crate::refine::{refine_mask, ModulationMask, RefineConfig};
use crate::uncertainty::predict_mask;

/// Everything the reverse chain is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub lr: ImageGrid,
    pub lr_up: ImageGrid,
    pub b: ModulationMask,
    pub encoded: Tensor,
}

/// Anything that can predict the (modulated) noise in `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &ImageGrid, t: usize, cond: &ConditionBundle) -> Result<ImageGrid>;
}

/// The trained U-shaped predictor.
#[derive(Debug, Clone, Copy)]
pub struct UNet<'a>(pub &'a NetworkParams);

impl NoisePredictor for UNet<'_> {
    fn predict_noise(&self, x_t: &ImageGrid, t: usize, cond: &ConditionBundle) -> Result<ImageGrid> {
        predict_noise(self.0, x_t, t, &cond.encoded)
    }
}

/// Trained components needed for super-resolution.
pub struct SrModels<'a, P: NoisePredictor> {
    pub predictor: &'a P,
    pub encoder: &'a NetworkParams,
    /// Required whenever `guidance` uses the mask.
    pub bayes: Option<&'a NetworkParams>,
    pub schedule: &'a DiffusionSchedule,
    pub refine: &'a RefineConfig,
    pub guidance: Guidance,
}

/// Noise injected by the reverse steps with `t > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepNoise {
    Gaussian,
    Zero,
}

/// T-step super-resolution of `lr`; returns `clamp(up(lr) + x_0, 0, 1)`.
pub fn sample_sr<P: NoisePredictor>(
    lr: &ImageGrid,
    models: &SrModels<'_, P>,
    scale_factor: usize,
    seed: u64,
) -> Result<ImageGrid> {
    sample_sr_with(lr, models, scale_factor, seed, StepNoise::Gaussian)
}

pub fn sample_sr_with<P: NoisePredictor>(
    lr: &ImageGrid,
    models: &SrModels<'_, P>,
    scale_factor: usize,
    seed: u64,
    step_noise: StepNoise,
) -> Result<ImageGrid> {
    if scale_factor != 2 && scale_factor != 4 {
        return Err(config_err(format!("scale factor must be 2 or 4, got {scale_factor}")));
    }
    let lr_up = upscale(lr, scale_factor)?;
    let (h, w) = lr_up.dims();
    let b = if models.guidance.uses_mask() {
        let bayes = models
            .bayes
            .ok_or_else(|| config_err("mask guidance requires an uncertainty network"))?;
        refine_mask(&predict_mask(bayes, lr, scale_factor)?, models.refine)?
    } else {
        ModulationMask::ones(h, w)
    };
    let encoded = encode_lr(models.encoder, &lr_up, &b, models.guidance.use_be)?;
    let chain_mask = if models.guidance.use_bg {
        b.clone()
    } else {
        ModulationMask::ones(h, w)
    };
    let cond = ConditionBundle {
        lr: lr.clone(),
        lr_up,
        b,
        encoded,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal_grid(&mut rng, h, w);
    let zero = ImageGrid::zeros(h, w);
    for t in (1..=models.schedule.steps()).rev() {
        let eps_hat = models.predictor.predict_noise(&x, t, &cond)?;
        let z = if t > 1 && step_noise == StepNoise::Gaussian {
            standard_normal_grid(&mut rng, h, w)
        } else {
            zero.clone()
        };
        x = posterior_step(&x, t, &eps_hat, &chain_mask, &z, models.schedule)?;
    }
    Ok(cond.lr_up.zip_map(&x, |u, r| (u + r).clamp(0.0, 1.0))?)
}
