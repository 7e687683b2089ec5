use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::grid::ImageGrid;
use crate::nn::{NetworkParams, ParamInit, Tape, Tensor, Var};

use super::schedule::DiffusionSchedule;

pub const TIME_EMBED_DIM: usize = 32;

/// Assumed standard deviation of the HR residual the chain generates.
pub const RESIDUAL_SCALE: f64 = 0.1;

const PRECOND: &str = "precond";

/// Sinusoidal embedding of step `t` with geometrically spaced frequencies.
pub fn time_embedding(t: usize) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    let mut data = vec![0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor {
        shape: vec![TIME_EMBED_DIM],
        data,
    }
}

/// Per-step `(c_in, c_skip, c_out)`: the network sees `c_in * x_t` and the
/// prediction is `c_skip * x_t + c_out * F`, where `c_skip * x_t` is the
/// linear least-squares estimate of the noise for a residual of spread
/// [`RESIDUAL_SCALE`] and `c_out` is the spread of what it leaves over.
fn preconditioning(schedule: &DiffusionSchedule) -> Vec<f64> {
    let s2 = RESIDUAL_SCALE * RESIDUAL_SCALE;
    let mut out = Vec::with_capacity(3 * (schedule.steps() + 1));
    for t in 0..=schedule.steps() {
        let a = if t == 0 { 1.0 } else { schedule.alpha_bar(t) };
        let v = a * s2 + (1.0 - a);
        for c in [1.0 / v.sqrt(), (1.0 - a).sqrt() / v, (a * s2 / v).sqrt()] {
            out.push(f64::from(c as f32));
        }
    }
    out
}

/// Two-level U-shaped noise predictor over `[x_t, encoded condition]`.
///
/// The schedule's preconditioning is stored alongside the weights as the
/// `precond` tensor; it never receives a gradient.
pub fn init_noise_predictor(
    seed: u64,
    base_channels: usize,
    cond_channels: usize,
    schedule: &DiffusionSchedule,
) -> Result<NetworkParams> {
    if base_channels < 8 {
        return Err(config_err(format!(
            "noise predictor needs >= 8 base channels, got {base_channels}"
        )));
    }
    if cond_channels == 0 {
        return Err(config_err("noise predictor needs condition channels"));
    }
    let c = base_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit {
        rng: &mut rng,
        params: NetworkParams::new(),
    };
    init.conv("stem", 1 + cond_channels, c, 3)?;
    init.linear("time_stem", TIME_EMBED_DIM, c)?;
    init.conv("down1", c, 2 * c, 3)?;
    init.linear("time_down1", TIME_EMBED_DIM, 2 * c)?;
    init.conv("down2", 2 * c, 2 * c, 3)?;
    init.linear("time_down2", TIME_EMBED_DIM, 2 * c)?;
    init.conv("mid", 2 * c, 2 * c, 3)?;
    init.linear("time_mid", TIME_EMBED_DIM, 2 * c)?;
    init.conv("up1", 4 * c, 2 * c, 3)?;
    init.linear("time_up1", TIME_EMBED_DIM, 2 * c)?;
    init.conv("up2", 3 * c, c, 3)?;
    init.linear("time_up2", TIME_EMBED_DIM, c)?;
    init.conv("out", c, 1, 3)?;
    let mut params = init.params;
    params.push(PRECOND, vec![schedule.steps() + 1, 3], preconditioning(schedule))?;
    Ok(params)
}

fn stage(tape: &mut Tape<'_>, x: Var, temb: Var, name: &str, stride: usize) -> Result<Var> {
    let h = tape.conv2d(x, name, stride)?;
    let shift = tape.linear(temb, &format!("time_{name}"))?;
    let h = tape.add_channel(h, shift)?;
    Ok(tape.silu(h))
}

pub(crate) fn record_unet(tape: &mut Tape<'_>, x_t: &ImageGrid, t: usize, cond: &Tensor) -> Result<Var> {
    let (h, w) = x_t.dims();
    let (_, ch, cw) = cond.dims3();
    if (ch, cw) != (h, w) {
        return Err(shape_err(format!("condition {ch}x{cw} does not match x_t {h}x{w}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(shape_err(format!("noise predictor needs sides divisible by 4, got {h}x{w}")));
    }
    let pre = &tape.params().require(PRECOND)?.values;
    if t == 0 || 3 * t + 2 >= pre.len() {
        return Err(shape_err(format!("step {t} outside the predictor's schedule")));
    }
    let (c_in, c_skip, c_out) = (pre[3 * t], pre[3 * t + 1], pre[3 * t + 2]);
    let x = tape.input(Tensor::from_grid(&x_t.map(|v| c_in * v)));
    let skip = tape.input(Tensor::from_grid(&x_t.map(|v| c_skip * v)));
    let c = tape.input(cond.clone());
    let temb = tape.input(time_embedding(t));
    let x = tape.concat(x, c)?;
    let h0 = stage(tape, x, temb, "stem", 1)?;
    let h1 = stage(tape, h0, temb, "down1", 2)?;
    let h2 = stage(tape, h1, temb, "down2", 2)?;
    let m = stage(tape, h2, temb, "mid", 1)?;
    let u = tape.upsample2(m);
    let u = tape.concat(u, h1)?;
    let u1 = stage(tape, u, temb, "up1", 1)?;
    let u = tape.upsample2(u1);
    let u = tape.concat(u, h0)?;
    let u2 = stage(tape, u, temb, "up2", 1)?;
    let out = tape.conv2d(u2, "out", 1)?;
    let out = tape.scale(out, c_out);
    tape.add(out, skip)
}

/// Predicted noise for `x_t` at step `t` given encoded condition features.
pub fn predict_noise(net: &NetworkParams, x_t: &ImageGrid, t: usize, cond: &Tensor) -> Result<ImageGrid> {
    let mut tape = Tape::new(net);
    let out = record_unet(&mut tape, x_t, t, cond)?;
    Ok(tape.value(out).channel(0))
}
