use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::encoder::{encode_lr, sign};
use super::process::{q_sample, residual};
use super::schedule::DiffusionSchedule;
use super::unet::record_unet;
use crate::data::upscale;
use crate::error::{config_err, shape_err, Result};
use crate::grid::ImageGrid;
use crate::nn::{Adam, NetworkParams, ParamGrads, Tape, Tensor, TrainConfig};
use crate::refine::{modulate_noise, ModulationMask};

/// Which of the two mask couplings are active: `use_bg` modulates the
/// diffusion noise by B, `use_be` feeds B to the LR encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guidance {
    pub use_bg: bool,
    pub use_be: bool,
}

impl Guidance {
    pub const BUFF: Guidance = Guidance { use_bg: true, use_be: true };
    pub const BASELINE: Guidance = Guidance { use_bg: false, use_be: false };

    pub fn uses_mask(&self) -> bool {
        self.use_bg || self.use_be
    }
}

/// One training image with its pre-generated modulation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionExample {
    pub lr: ImageGrid,
    pub hr: ImageGrid,
    pub mask: ModulationMask,
}

/// A [`DiffusionExample`] with its bicubic upscale and residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub lr_up: ImageGrid,
    pub residual: ImageGrid,
    pub mask: ModulationMask,
}

pub fn prepare_examples(dataset: &[DiffusionExample]) -> Result<Vec<PreparedExample>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (h, w) = ex.hr.dims();
            let (lh, lw) = ex.lr.dims();
            if lh == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
                return Err(shape_err(format!("example {i}: HR {h}x{w} vs LR {lh}x{lw}")));
            }
            ex.hr.ensure_same_dims(ex.mask.grid())?;
            let lr_up = upscale(&ex.lr, h / lh)?;
            Ok(PreparedExample {
                residual: residual(&ex.hr, &lr_up)?,
                lr_up,
                mask: ex.mask.clone(),
            })
        })
        .collect()
}

pub(crate) fn standard_normal_grid<R: Rng>(rng: &mut R, h: usize, w: usize) -> ImageGrid {
    let data = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    ImageGrid::new(h, w, data).expect("h*w samples")
}

/// Trains the noise predictor against a frozen encoder. Each sample draws an
/// image, a step `t` and unit noise `eps`; the target is `eps * B` when
/// `use_bg` is set and `eps` otherwise, and the loss is the mean absolute
/// error.
pub fn train_diffusion(
    predictor: &NetworkParams,
    encoder: &NetworkParams,
    dataset: &[DiffusionExample],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    guidance: Guidance,
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(config_err("diffusion training dataset is empty"));
    }
    let prepared = prepare_examples(dataset)?;
    let features: Vec<Tensor> = prepared
        .iter()
        .map(|ex| encode_lr(encoder, &ex.lr_up, &ex.mask, guidance.use_be))
        .collect::<Result<_>>()?;

    let mut params = predictor.clone();
    let mut opt = Adam::new(&params, cfg.adam_beta1, cfg.adam_beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    let steps = sched.steps();

    for iter in 0..cfg.iterations {
        let mut grads = ParamGrads::zeros_like(&params);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..prepared.len());
            let t = rng.random_range(1..=steps);
            let ex = &prepared[idx];
            let (h, w) = ex.residual.dims();
            let eps = standard_normal_grid(&mut rng, h, w);
            let (target, x_t) = if guidance.use_bg {
                (modulate_noise(&eps, &ex.mask)?, q_sample(&ex.residual, t, &ex.mask, &eps, sched)?)
            } else {
                let ones = ModulationMask::ones(h, w);
                (eps.clone(), q_sample(&ex.residual, t, &ones, &eps, sched)?)
            };

            let mut tape = Tape::new(&params);
            let out = record_unet(&mut tape, &x_t, t, &features[idx])?;
            let pred = tape.value(out);
            let n = (h * w * cfg.batch_size) as f64;
            let mut seed = Tensor::zeros(&pred.shape);
            for (i, (&p, &y)) in pred.data.iter().zip(target.as_slice()).enumerate() {
                total += (p - y).abs() / n;
                seed.data[i] = sign(p - y) / n;
            }
            grads.add_assign(&tape.backward(vec![(out, seed)]));
        }
        opt.step(&mut params, &grads, cfg.lr_at(iter));
        history.push(total);
        if (iter + 1) % 500 == 0 {
            log::debug!("diffusion iter {} loss {:.5}", iter + 1, total);
        }
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::degrade;
    use crate::diffusion::{init_encoder, init_noise_predictor, make_schedule};
    use crate::nn::LrSchedule;

    fn toy(n: usize, random_mask: bool) -> Vec<DiffusionExample> {
        (0..n)
            .map(|k| {
                let hr = ImageGrid::from_fn(16, 16, |r, c| {
                    0.5 + 0.3 * ((r as f64 * 0.8 + k as f64).sin() * (c as f64 * 1.1).cos())
                });
                let lr = degrade(&hr, 4).unwrap();
                let mask = if random_mask {
                    ModulationMask::new(ImageGrid::from_fn(16, 16, |r, c| 0.7 + ((r * 3 + c + k) % 7) as f64 * 0.1))
                        .unwrap()
                } else {
                    ModulationMask::ones(16, 16)
                };
                DiffusionExample { lr, hr, mask }
            })
            .collect()
    }

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            learning_rate: 2e-3,
            schedule: LrSchedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 17,
        }
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let sched = make_schedule(20, 1e-3, 0.1).unwrap();
        let enc = init_encoder(1, 4, true).unwrap();
        let net = init_noise_predictor(2, 8, 4, &sched).unwrap();
        let data = toy(4, true);
        let (_, hist) = train_diffusion(&net, &enc, &data, &sched, &cfg(300), Guidance::BUFF).unwrap();
        let first: f64 = hist[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = hist[hist.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(last < first, "first {first} last {last}");
        let (_, again) = train_diffusion(&net, &enc, &data, &sched, &cfg(300), Guidance::BUFF).unwrap();
        assert_eq!(hist, again);
        let (trained, _) = train_diffusion(&net, &enc, &data, &sched, &cfg(5), Guidance::BUFF).unwrap();
        assert_eq!(trained.get("precond"), net.get("precond"));
        assert!(train_diffusion(&net, &enc, &[], &sched, &cfg(3), Guidance::BUFF).is_err());
    }

    #[test]
    fn unguided_training_ignores_masks() {
        let sched = make_schedule(10, 1e-3, 0.1).unwrap();
        let enc = init_encoder(1, 4, false).unwrap();
        let net = init_noise_predictor(2, 8, 4, &sched).unwrap();
        let masked = train_diffusion(&net, &enc, &toy(3, true), &sched, &cfg(20), Guidance::BASELINE).unwrap();
        let plain = train_diffusion(&net, &enc, &toy(3, false), &sched, &cfg(20), Guidance::BASELINE).unwrap();
        let bg_ones = train_diffusion(
            &net,
            &enc,
            &toy(3, false),
            &sched,
            &cfg(20),
            Guidance { use_bg: true, use_be: false },
        )
        .unwrap();
        assert_eq!(masked, plain);
        assert_eq!(plain, bg_ones);
    }
}
