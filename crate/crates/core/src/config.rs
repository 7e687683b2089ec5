//! Run configuration: namespaced `key=value` settings with documented
//! defaults.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetSpec, TextureMix};
use crate::diffusion::Guidance;
use crate::error::{config_err, Result};
use crate::nn::{LrSchedule, TrainConfig};
use crate::refine::{RefineConfig, ThresholdMode};

/// Environment variable that overrides `data.seed`.
pub const SEED_ENV: &str = "BUFF_SEED";

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.seed", "seed of the synthetic training set (held-out set uses seed + 1)"),
    ("data.count", "number of training images"),
    ("data.test_count", "number of held-out images"),
    ("data.size", "HR side length in pixels"),
    ("data.scale", "downscaling factor, 2 or 4"),
    ("data.patch", "HR patch side used for training"),
    ("data.stride", "stride between training patches"),
    ("data.mix.smooth", "weight of smooth-gradient textures"),
    ("data.mix.grating", "weight of sinusoidal gratings"),
    ("data.mix.blobs", "weight of random blobs"),
    ("data.mix.checker", "weight of checker edges"),
    ("bayes.channels", "width of the uncertainty network"),
    ("bayes.iterations", "uncertainty network training steps"),
    ("bayes.batch", "uncertainty network batch size"),
    ("bayes.lr", "uncertainty network learning rate"),
    ("bayes.lr_decay", "step decay factor of the uncertainty learning rate"),
    ("bayes.lr_decay_every", "iterations between learning-rate decays"),
    ("bayes.beta1", "Adam beta1 for the uncertainty network"),
    ("bayes.beta2", "Adam beta2 for the uncertainty network"),
    ("bayes.seed", "initialisation and batching seed of the uncertainty network"),
    ("refine.k", "steepness of the adjustment sigmoid"),
    ("refine.delta1", "amplification base above the threshold"),
    ("refine.delta2", "reduction base below the threshold"),
    ("refine.gamma", "adjustment intensity"),
    ("refine.threshold", "fixed threshold, used when refine.threshold_mode=fixed"),
    ("refine.threshold_mode", "median (per-image median) or fixed"),
    ("diffusion.T", "number of diffusion steps"),
    ("diffusion.beta_start", "first beta of the linear schedule"),
    ("diffusion.beta_end", "last beta of the linear schedule"),
    ("diffusion.channels", "base width of the noise predictor"),
    ("diffusion.iterations", "noise predictor training steps"),
    ("diffusion.batch", "noise predictor batch size"),
    ("diffusion.lr", "noise predictor learning rate (cosine decay)"),
    ("diffusion.beta1", "Adam beta1 for the noise predictor"),
    ("diffusion.beta2", "Adam beta2 for the noise predictor"),
    ("diffusion.seed", "initialisation and sampling seed of the noise predictor"),
    ("diffusion.use_bg", "multiply the diffusion noise by the refined mask"),
    ("diffusion.use_be", "feed the refined mask to the LR encoder"),
    ("encoder.channels", "width of the LR encoder"),
    ("encoder.pretrain_iterations", "L1 pre-training steps of the LR encoder (0 skips it)"),
    ("encoder.batch", "encoder pre-training batch size"),
    ("encoder.lr", "encoder pre-training learning rate (cosine decay)"),
    ("encoder.seed", "initialisation and batching seed of the LR encoder"),
    ("infer.seed", "base seed of the reverse chains; image i uses infer.seed + i"),
    ("eval.steps", "number of removal fractions in sparsification curves"),
    ("paths.work_dir", "root directory of all artifacts"),
    ("paths.dataset", "dataset directory, relative to the work dir"),
    ("paths.checkpoints", "checkpoint directory, relative to the work dir"),
    ("paths.masks", "mask directory, relative to the work dir"),
    ("paths.outputs", "SR image and metrics directory, relative to the work dir"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_seed: u64,
    pub data_count: usize,
    pub data_test_count: usize,
    pub data_size: usize,
    pub data_scale: usize,
    pub data_patch: usize,
    pub data_stride: usize,
    pub data_mix: TextureMix,

    pub bayes_channels: usize,
    pub bayes_iterations: usize,
    pub bayes_batch: usize,
    pub bayes_lr: f64,
    pub bayes_lr_decay: f64,
    pub bayes_lr_decay_every: usize,
    pub bayes_beta1: f64,
    pub bayes_beta2: f64,
    pub bayes_seed: u64,

    pub refine: RefineConfig,

    pub diffusion_steps: usize,
    pub diffusion_beta_start: f64,
    pub diffusion_beta_end: f64,
    pub diffusion_channels: usize,
    pub diffusion_iterations: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    pub diffusion_beta1: f64,
    pub diffusion_beta2: f64,
    pub diffusion_seed: u64,
    pub guidance: Guidance,

    pub encoder_channels: usize,
    pub encoder_pretrain_iterations: usize,
    pub encoder_batch: usize,
    pub encoder_lr: f64,
    pub encoder_seed: u64,

    pub infer_seed: u64,
    pub eval_steps: usize,

    pub work_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_seed: 2024,
            data_count: 64,
            data_test_count: 16,
            data_size: 32,
            data_scale: 4,
            data_patch: 32,
            data_stride: 32,
            data_mix: TextureMix::UNIFORM,

            bayes_channels: 16,
            bayes_iterations: 2000,
            bayes_batch: 16,
            bayes_lr: 1e-4,
            bayes_lr_decay: 0.5,
            bayes_lr_decay_every: 200_000,
            bayes_beta1: 0.9,
            bayes_beta2: 0.999,
            bayes_seed: 11,

            refine: RefineConfig::default(),

            diffusion_steps: 100,
            diffusion_beta_start: 1e-4,
            diffusion_beta_end: 0.05,
            diffusion_channels: 8,
            diffusion_iterations: 5000,
            diffusion_batch: 16,
            diffusion_lr: 2e-4,
            diffusion_beta1: 0.9,
            diffusion_beta2: 0.999,
            diffusion_seed: 13,
            guidance: Guidance::BUFF,

            encoder_channels: 8,
            encoder_pretrain_iterations: 500,
            encoder_batch: 16,
            encoder_lr: 2e-4,
            encoder_seed: 17,

            infer_seed: 19,
            eval_steps: 20,

            work_dir: PathBuf::from("buff-run"),
            dataset_dir: PathBuf::from("dataset"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            mask_dir: PathBuf::from("masks"),
            output_dir: PathBuf::from("outputs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}: expected true or false")),
    }
}

impl RunConfig {
    /// Assign one key. The error text names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.count" => self.data_count = parse(key, v)?,
            "data.test_count" => self.data_test_count = parse(key, v)?,
            "data.size" => self.data_size = parse(key, v)?,
            "data.scale" => self.data_scale = parse(key, v)?,
            "data.patch" => self.data_patch = parse(key, v)?,
            "data.stride" => self.data_stride = parse(key, v)?,
            "data.mix.smooth" => self.data_mix.smooth = parse(key, v)?,
            "data.mix.grating" => self.data_mix.grating = parse(key, v)?,
            "data.mix.blobs" => self.data_mix.blobs = parse(key, v)?,
            "data.mix.checker" => self.data_mix.checker = parse(key, v)?,
            "bayes.channels" => self.bayes_channels = parse(key, v)?,
            "bayes.iterations" => self.bayes_iterations = parse(key, v)?,
            "bayes.batch" => self.bayes_batch = parse(key, v)?,
            "bayes.lr" => self.bayes_lr = parse(key, v)?,
            "bayes.lr_decay" => self.bayes_lr_decay = parse(key, v)?,
            "bayes.lr_decay_every" => self.bayes_lr_decay_every = parse(key, v)?,
            "bayes.beta1" => self.bayes_beta1 = parse(key, v)?,
            "bayes.beta2" => self.bayes_beta2 = parse(key, v)?,
            "bayes.seed" => self.bayes_seed = parse(key, v)?,
            "refine.k" => self.refine.steepness = parse(key, v)?,
            "refine.delta1" => self.refine.amp_base = parse(key, v)?,
            "refine.delta2" => self.refine.red_base = parse(key, v)?,
            "refine.gamma" => self.refine.intensity = parse(key, v)?,
            "refine.threshold" => self.refine.threshold = parse(key, v)?,
            "refine.threshold_mode" => {
                self.refine.threshold_mode = match v {
                    "median" => ThresholdMode::PerImageMedian,
                    "fixed" => ThresholdMode::Fixed,
                    _ => return Err(format!("invalid value {v:?} for {key}: expected median or fixed")),
                }
            }
            "diffusion.T" => self.diffusion_steps = parse(key, v)?,
            "diffusion.beta_start" => self.diffusion_beta_start = parse(key, v)?,
            "diffusion.beta_end" => self.diffusion_beta_end = parse(key, v)?,
            "diffusion.channels" => self.diffusion_channels = parse(key, v)?,
            "diffusion.iterations" => self.diffusion_iterations = parse(key, v)?,
            "diffusion.batch" => self.diffusion_batch = parse(key, v)?,
            "diffusion.lr" => self.diffusion_lr = parse(key, v)?,
            "diffusion.beta1" => self.diffusion_beta1 = parse(key, v)?,
            "diffusion.beta2" => self.diffusion_beta2 = parse(key, v)?,
            "diffusion.seed" => self.diffusion_seed = parse(key, v)?,
            "diffusion.use_bg" => self.guidance.use_bg = parse_bool(key, v)?,
            "diffusion.use_be" => self.guidance.use_be = parse_bool(key, v)?,
            "encoder.channels" => self.encoder_channels = parse(key, v)?,
            "encoder.pretrain_iterations" => self.encoder_pretrain_iterations = parse(key, v)?,
            "encoder.batch" => self.encoder_batch = parse(key, v)?,
            "encoder.lr" => self.encoder_lr = parse(key, v)?,
            "encoder.seed" => self.encoder_seed = parse(key, v)?,
            "infer.seed" => self.infer_seed = parse(key, v)?,
            "eval.steps" => self.eval_steps = parse(key, v)?,
            "paths.work_dir" => self.work_dir = PathBuf::from(v),
            "paths.dataset" => self.dataset_dir = PathBuf::from(v),
            "paths.checkpoints" => self.checkpoint_dir = PathBuf::from(v),
            "paths.masks" => self.mask_dir = PathBuf::from(v),
            "paths.outputs" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "data.seed" => self.data_seed.to_string(),
            "data.count" => self.data_count.to_string(),
            "data.test_count" => self.data_test_count.to_string(),
            "data.size" => self.data_size.to_string(),
            "data.scale" => self.data_scale.to_string(),
            "data.patch" => self.data_patch.to_string(),
            "data.stride" => self.data_stride.to_string(),
            "data.mix.smooth" => self.data_mix.smooth.to_string(),
            "data.mix.grating" => self.data_mix.grating.to_string(),
            "data.mix.blobs" => self.data_mix.blobs.to_string(),
            "data.mix.checker" => self.data_mix.checker.to_string(),
            "bayes.channels" => self.bayes_channels.to_string(),
            "bayes.iterations" => self.bayes_iterations.to_string(),
            "bayes.batch" => self.bayes_batch.to_string(),
            "bayes.lr" => self.bayes_lr.to_string(),
            "bayes.lr_decay" => self.bayes_lr_decay.to_string(),
            "bayes.lr_decay_every" => self.bayes_lr_decay_every.to_string(),
            "bayes.beta1" => self.bayes_beta1.to_string(),
            "bayes.beta2" => self.bayes_beta2.to_string(),
            "bayes.seed" => self.bayes_seed.to_string(),
            "refine.k" => self.refine.steepness.to_string(),
            "refine.delta1" => self.refine.amp_base.to_string(),
            "refine.delta2" => self.refine.red_base.to_string(),
            "refine.gamma" => self.refine.intensity.to_string(),
            "refine.threshold" => self.refine.threshold.to_string(),
            "refine.threshold_mode" => match self.refine.threshold_mode {
                ThresholdMode::PerImageMedian => "median".to_string(),
                ThresholdMode::Fixed => "fixed".to_string(),
            },
            "diffusion.T" => self.diffusion_steps.to_string(),
            "diffusion.beta_start" => self.diffusion_beta_start.to_string(),
            "diffusion.beta_end" => self.diffusion_beta_end.to_string(),
            "diffusion.channels" => self.diffusion_channels.to_string(),
            "diffusion.iterations" => self.diffusion_iterations.to_string(),
            "diffusion.batch" => self.diffusion_batch.to_string(),
            "diffusion.lr" => self.diffusion_lr.to_string(),
            "diffusion.beta1" => self.diffusion_beta1.to_string(),
            "diffusion.beta2" => self.diffusion_beta2.to_string(),
            "diffusion.seed" => self.diffusion_seed.to_string(),
            "diffusion.use_bg" => self.guidance.use_bg.to_string(),
            "diffusion.use_be" => self.guidance.use_be.to_string(),
            "encoder.channels" => self.encoder_channels.to_string(),
            "encoder.pretrain_iterations" => self.encoder_pretrain_iterations.to_string(),
            "encoder.batch" => self.encoder_batch.to_string(),
            "encoder.lr" => self.encoder_lr.to_string(),
            "encoder.seed" => self.encoder_seed.to_string(),
            "infer.seed" => self.infer_seed.to_string(),
            "eval.steps" => self.eval_steps.to_string(),
            "paths.work_dir" => self.work_dir.display().to_string(),
            "paths.dataset" => self.dataset_dir.display().to_string(),
            "paths.checkpoints" => self.checkpoint_dir.display().to_string(),
            "paths.masks" => self.mask_dir.display().to_string(),
            "paths.outputs" => self.output_dir.display().to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// The full effective configuration, one `key=value` per line.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Cross-field checks beyond what parsing can see.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.test_dataset_spec().validate()?;
        if self.data_scale != 2 && self.data_scale != 4 {
            return Err(config_err(format!("data.scale must be 2 or 4, got {}", self.data_scale)));
        }
        if self.data_patch == 0
            || self.data_patch > self.data_size
            || self.data_patch % self.data_scale != 0
            || self.data_stride == 0
            || self.data_stride % self.data_scale != 0
        {
            return Err(config_err(
                "data.patch and data.stride must be positive multiples of data.scale, patch <= size",
            ));
        }
        if self.data_patch % 4 != 0 {
            return Err(config_err("data.patch must be divisible by 4 for the noise predictor"));
        }
        self.refine.validate()?;
        self.bayes_train().validate()?;
        self.diffusion_train().validate()?;
        if self.encoder_pretrain_iterations > 0 {
            self.encoder_train().validate()?;
        }
        if !(self.diffusion_beta_start > 0.0
            && self.diffusion_beta_start <= self.diffusion_beta_end
            && self.diffusion_beta_end < 1.0)
            || self.diffusion_steps == 0
        {
            return Err(config_err("need diffusion.T >= 1 and 0 < beta_start <= beta_end < 1"));
        }
        if self.eval_steps < 2 {
            return Err(config_err("eval.steps must be >= 2"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data_count,
            size: self.data_size,
            scale_factor: self.data_scale,
            texture_mix: self.data_mix,
            seed: self.data_seed,
        }
    }

    pub fn test_dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data_test_count,
            seed: self.data_seed.wrapping_add(1),
            ..self.dataset_spec()
        }
    }

    pub fn bayes_train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.bayes_iterations,
            batch_size: self.bayes_batch,
            learning_rate: self.bayes_lr,
            schedule: LrSchedule::Step {
                factor: self.bayes_lr_decay,
                every: self.bayes_lr_decay_every,
            },
            adam_beta1: self.bayes_beta1,
            adam_beta2: self.bayes_beta2,
            seed: self.bayes_seed,
        }
    }

    pub fn diffusion_train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.diffusion_iterations,
            batch_size: self.diffusion_batch,
            learning_rate: self.diffusion_lr,
            schedule: LrSchedule::Cosine,
            adam_beta1: self.diffusion_beta1,
            adam_beta2: self.diffusion_beta2,
            seed: self.diffusion_seed,
        }
    }

    pub fn encoder_train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.encoder_pretrain_iterations,
            batch_size: self.encoder_batch,
            learning_rate: self.encoder_lr,
            schedule: LrSchedule::Cosine,
            adam_beta1: self.diffusion_beta1,
            adam_beta2: self.diffusion_beta2,
            seed: self.encoder_seed,
        }
    }

    fn under_work_dir(&self, p: &Path) -> PathBuf {
        self.work_dir.join(p)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.under_work_dir(&self.dataset_dir)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.under_work_dir(&self.checkpoint_dir)
    }

    pub fn mask_path(&self) -> PathBuf {
        self.under_work_dir(&self.mask_dir)
    }

    pub fn output_path(&self) -> PathBuf {
        self.under_work_dir(&self.output_dir)
    }
}

/// Parse a config file body and command-line overrides on top of the
/// defaults. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    parse_config_with_env(text, overrides, None)
}

/// As [`parse_config`], with `env_seed` (the value of `BUFF_SEED`) applied
/// after the file and before the command-line pairs.
pub fn parse_config_with_env(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        cfg.set(k.trim(), v)
            .map_err(|e| config_err(format!("line {}: {e}", i + 1)))?;
    }
    if let Some(seed) = env_seed {
        cfg.set("data.seed", seed)
            .map_err(|e| config_err(format!("{SEED_ENV}: {e}")))?;
    }
    for (i, pair) in overrides.iter().enumerate() {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            config_err(format!("override {}: expected key=value, got {pair:?}", i + 1))
        })?;
        cfg.set(k.trim(), v)
            .map_err(|e| config_err(format!("override {}: {e}", i + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
