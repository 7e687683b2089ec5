use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::PreparedExample;
use crate::error::{config_err, shape_err, Result};
use crate::grid::ImageGrid;
use crate::nn::{Adam, NetworkParams, ParamGrads, ParamInit, Tape, Tensor, TrainConfig, Var};
use crate::refine::ModulationMask;

/// Three-convolution residual encoder. With `use_be` the input is the
/// two-channel stack `[lr_up, B]`, otherwise `lr_up` alone. The `recon` head
/// is used only for L1 pre-training.
pub fn init_encoder(seed: u64, width: usize, use_be: bool) -> Result<NetworkParams> {
    if width == 0 {
        return Err(config_err("encoder width must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit {
        rng: &mut rng,
        params: NetworkParams::new(),
    };
    init.conv("enc1", if use_be { 2 } else { 1 }, width, 3)?;
    init.conv("enc2", width, width, 3)?;
    init.conv("enc3", width, width, 3)?;
    init.conv("recon", width, 1, 3)?;
    Ok(init.params)
}

fn record_encoder(
    tape: &mut Tape<'_>,
    encoder: &NetworkParams,
    lr_up: &ImageGrid,
    b: &ModulationMask,
    use_be: bool,
) -> Result<Var> {
    lr_up.ensure_same_dims(b.grid())?;
    let in_ch = encoder.require("enc1.weight")?.shape[1];
    if in_ch != if use_be { 2 } else { 1 } {
        return Err(shape_err(format!(
            "encoder expects {in_ch} input channels but use_be={use_be}"
        )));
    }
    let input = if use_be {
        Tensor::stack(&[lr_up, b.grid()])?
    } else {
        Tensor::from_grid(lr_up)
    };
    let x = tape.input(input);
    let h1 = tape.conv2d(x, "enc1", 1)?;
    let h1 = tape.silu(h1);
    let h2 = tape.conv2d(h1, "enc2", 1)?;
    let h2 = tape.silu(h2);
    let h3 = tape.conv2d(h2, "enc3", 1)?;
    tape.add(h1, h3)
}

/// HR-resolution condition features, computed once per image.
pub fn encode_lr(encoder: &NetworkParams, lr_up: &ImageGrid, b: &ModulationMask, use_be: bool) -> Result<Tensor> {
    let mut tape = Tape::new(encoder);
    let out = record_encoder(&mut tape, encoder, lr_up, b, use_be)?;
    Ok(tape.value(out).clone())
}

/// L1 pre-training: the `recon` head maps features to the residual.
pub fn pretrain_encoder(
    encoder: &NetworkParams,
    examples: &[PreparedExample],
    cfg: &TrainConfig,
    use_be: bool,
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(config_err("encoder pre-training dataset is empty"));
    }
    let mut params = encoder.clone();
    let mut opt = Adam::new(&params, cfg.adam_beta1, cfg.adam_beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut grads = ParamGrads::zeros_like(&params);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let mut tape = Tape::new(&params);
            let feats = record_encoder(&mut tape, &params, &ex.lr_up, &ex.mask, use_be)?;
            let recon = tape.conv2d(feats, "recon", 1)?;
            let pred = tape.value(recon);
            let n = (ex.residual.len() * cfg.batch_size) as f64;
            let mut seed = Tensor::zeros(&pred.shape);
            for (i, (&p, &r)) in pred.data.iter().zip(ex.residual.as_slice()).enumerate() {
                total += (p - r).abs() / n;
                seed.data[i] = sign(p - r) / n;
            }
            grads.add_assign(&tape.backward(vec![(recon, seed)]));
        }
        opt.step(&mut params, &grads, cfg.lr_at(iter));
        history.push(total);
    }
    Ok((params, history))
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_channel_wiring() {
        let lr_up = ImageGrid::from_fn(32, 32, |r, c| ((r + c) % 5) as f64 / 5.0);
        let b1 = ModulationMask::ones(32, 32);
        let b2 = ModulationMask::new(ImageGrid::from_fn(32, 32, |r, _| 0.7 + 0.01 * r as f64)).unwrap();

        let plain = init_encoder(1, 6, false).unwrap();
        let f1 = encode_lr(&plain, &lr_up, &b1, false).unwrap();
        assert_eq!(f1, encode_lr(&plain, &lr_up, &b2, false).unwrap());
        assert_eq!(f1.shape, vec![6, 32, 32]);

        let be = init_encoder(1, 6, true).unwrap();
        let g1 = encode_lr(&be, &lr_up, &b1, true).unwrap();
        assert_eq!(g1, encode_lr(&be, &lr_up, &b1, true).unwrap());
        assert_ne!(g1, encode_lr(&be, &lr_up, &b2, true).unwrap());

        assert!(encode_lr(&plain, &lr_up, &b1, true).is_err());
        assert!(encode_lr(&be, &lr_up, &ModulationMask::ones(16, 16), true).is_err());
    }
}
