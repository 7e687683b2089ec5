//! Per-pixel generalized-Gaussian predictor trained by heteroscedastic NLL,
//! and extraction of the variance mask from its outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::upscale;
use crate::error::{config_err, domain_err, shape_err, Result};
use crate::gg::{gg_nll_with_grad, variance_unchecked, GGFieldParams};
use crate::grid::ImageGrid;
use crate::nn::{Adam, NetworkParams, ParamGrads, ParamInit, Tape, Tensor, TrainConfig, Var};

/// Lower bound added after softplus for the scale and shape maps.
pub const POSITIVITY_FLOOR: f64 = 1e-3;
/// Extra offset on the shape map keeping `Gamma(1/shape)` finite.
pub const SHAPE_OFFSET: f64 = 0.2;
/// Smallest spatial size covered by the network's 7x7 receptive field.
pub const MIN_INPUT_SIDE: usize = 7;

/// Per-pixel predicted variance, nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMask(ImageGrid);

impl UncertaintyMask {
    pub fn new(grid: ImageGrid) -> Result<Self> {
        if grid.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(domain_err("uncertainty mask entries must be finite and >= 0"));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.0
    }

    pub fn into_grid(self) -> ImageGrid {
        self.0
    }
}

/// Two 3x3 trunk convolutions followed by mean, scale and shape heads.
pub fn init_uncertainty_net(seed: u64, channels: usize) -> Result<NetworkParams> {
    if channels < 4 {
        return Err(config_err(format!("uncertainty net needs >= 4 channels, got {channels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit {
        rng: &mut rng,
        params: NetworkParams::new(),
    };
    init.conv("trunk1", 1, channels, 3)?;
    init.conv("trunk2", channels, channels, 3)?;
    init.conv("head_mean", channels, 1, 3)?;
    init.conv("head_scale", channels, 1, 3)?;
    init.conv("head_shape", channels, 1, 3)?;
    Ok(init.params)
}

struct Heads {
    mean: Var,
    scale: Var,
    shape: Var,
}

fn record_forward(tape: &mut Tape<'_>, lr_up: &ImageGrid) -> Result<Heads> {
    let (h, w) = lr_up.dims();
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(shape_err(format!(
            "uncertainty net input {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} receptive field"
        )));
    }
    let x = tape.input(Tensor::from_grid(lr_up));
    let t = tape.conv2d(x, "trunk1", 1)?;
    let t = tape.silu(t);
    let t = tape.conv2d(t, "trunk2", 1)?;
    let t = tape.silu(t);
    // The mean head predicts a correction to the upscaled input.
    let m = tape.conv2d(t, "head_mean", 1)?;
    let mean = tape.add(m, x)?;
    let s = tape.conv2d(t, "head_scale", 1)?;
    let s = tape.softplus(s);
    let scale = tape.add_scalar(s, POSITIVITY_FLOOR);
    let b = tape.conv2d(t, "head_shape", 1)?;
    let b = tape.softplus(b);
    let shape = tape.add_scalar(b, POSITIVITY_FLOOR + SHAPE_OFFSET);
    Ok(Heads { mean, scale, shape })
}

fn heads_to_field(tape: &Tape<'_>, heads: &Heads) -> Result<GGFieldParams> {
    GGFieldParams::new(
        tape.value(heads.mean).channel(0),
        tape.value(heads.scale).channel(0),
        tape.value(heads.shape).channel(0),
    )
}

/// Per-pixel `(mean, scale, shape)` for an HR-sized bicubic-upscaled input.
pub fn forward_uncertainty(net: &NetworkParams, lr_up: &ImageGrid) -> Result<GGFieldParams> {
    let mut tape = Tape::new(net);
    let heads = record_forward(&mut tape, lr_up)?;
    heads_to_field(&tape, &heads)
}

/// Mean NLL over a batch of `(lr_up, hr)` pairs and its parameter gradient.
pub fn objective_and_grad(
    net: &NetworkParams,
    batch: &[(&ImageGrid, &ImageGrid)],
) -> Result<(f64, ParamGrads)> {
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros_like(net);
    for (lr_up, hr) in batch {
        let mut tape = Tape::new(net);
        let heads = record_forward(&mut tape, lr_up)?;
        let field = heads_to_field(&tape, &heads)?;
        let (loss, g) = gg_nll_with_grad(&field, hr)?;
        total += loss * inv_b;
        let seed = |grid: &ImageGrid| {
            let mut t = Tensor::from_grid(grid);
            t.data.iter_mut().for_each(|v| *v *= inv_b);
            t
        };
        let sample_grads = tape.backward(vec![
            (heads.mean, seed(&g.mean)),
            (heads.scale, seed(&g.scale)),
            (heads.shape, seed(&g.shape)),
        ]);
        grads.add_assign(&sample_grads);
    }
    Ok((total, grads))
}

/// Seed-derived mini-batch indices, one batch per iteration, drawn uniformly
/// with replacement.
pub fn batch_schedule(cfg: &TrainConfig, dataset_len: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.iterations)
        .map(|_| (0..cfg.batch_size).map(|_| rng.random_range(0..dataset_len)).collect())
        .collect()
}

fn validate_pairs(dataset: &[(ImageGrid, ImageGrid)]) -> Result<()> {
    if dataset.is_empty() {
        return Err(config_err("training dataset is empty"));
    }
    for (i, (lr_up, hr)) in dataset.iter().enumerate() {
        lr_up
            .ensure_same_dims(hr)
            .map_err(|e| shape_err(format!("pair {i}: {e}")))?;
    }
    Ok(())
}

/// Adam on the heteroscedastic NLL over `(lr_up, hr)` pairs.
pub fn train_uncertainty(
    net: &NetworkParams,
    dataset: &[(ImageGrid, ImageGrid)],
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    validate_pairs(dataset)?;
    let schedule = batch_schedule(cfg, dataset.len());
    train_uncertainty_on_schedule(net, dataset, cfg, &schedule)
}

/// As [`train_uncertainty`] but with an explicit batch index sequence.
pub fn train_uncertainty_on_schedule(
    net: &NetworkParams,
    dataset: &[(ImageGrid, ImageGrid)],
    cfg: &TrainConfig,
    schedule: &[Vec<usize>],
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    validate_pairs(dataset)?;
    let mut params = net.clone();
    let mut opt = Adam::new(&params, cfg.adam_beta1, cfg.adam_beta2);
    let mut history = Vec::with_capacity(schedule.len());
    for (iter, batch_idx) in schedule.iter().enumerate() {
        let batch: Vec<(&ImageGrid, &ImageGrid)> = batch_idx
            .iter()
            .map(|&i| (&dataset[i].0, &dataset[i].1))
            .collect();
        let (loss, grads) = objective_and_grad(&params, &batch)?;
        opt.step(&mut params, &grads, cfg.lr_at(iter));
        history.push(loss);
        if (iter + 1) % 250 == 0 {
            log::debug!("uncertainty iter {} loss {:.5}", iter + 1, loss);
        }
    }
    Ok((params, history))
}

/// Variance map `scale^2 Gamma(3/shape) / Gamma(1/shape)` of a predicted field.
pub fn variance_map(field: &GGFieldParams) -> Result<UncertaintyMask> {
    let (h, w) = field.dims();
    let data = field
        .scale()
        .as_slice()
        .iter()
        .zip(field.shape().as_slice())
        .map(|(&a, &b)| variance_unchecked(a, b))
        .collect();
    UncertaintyMask::new(ImageGrid::new(h, w, data)?)
}

/// HR-resolution uncertainty mask for an LR image.
pub fn predict_mask(net: &NetworkParams, lr: &ImageGrid, scale_factor: usize) -> Result<UncertaintyMask> {
    if scale_factor != 2 && scale_factor != 4 {
        return Err(config_err(format!("scale factor must be 2 or 4, got {scale_factor}")));
    }
    let lr_up = upscale(lr, scale_factor)?;
    variance_map(&forward_uncertainty(net, &lr_up)?)
}
