//! Fast invariant checks run by the `selfcheck` stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    forward_step, init_encoder, make_schedule, q_marginal_variance, residual, sample_sr_with, ConditionBundle,
    DiffusionSchedule, Guidance, NoisePredictor, SrModels, StepNoise,
};
use crate::data::{degrade, upscale};
use crate::gg::{gg_nll, gg_nll_with_grad, gg_variance, log_gamma, GGFieldParams};
use crate::grid::ImageGrid;
use crate::io::{decode_tensors, encode_tensors};
use crate::metrics::{ause, sparsification};
use crate::refine::{refine_mask, ModulationMask, RefineConfig, ThresholdMode};
use crate::uncertainty::{init_uncertainty_net, UncertaintyMask};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> std::result::Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("log-gamma", check_log_gamma),
    ("gg-variance", check_gg_variance),
    ("nll-gradient", check_nll_gradient),
    ("forward-variance", check_forward_variance),
    ("refine-bounds", check_refine),
    ("ause", check_ause),
    ("checkpoint-round-trip", check_checkpoint),
    ("oracle-inversion", check_oracle_inversion),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn ok_or(cond: bool, ok: String, fail: String) -> std::result::Result<String, String> {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn check_log_gamma() -> std::result::Result<String, String> {
    let half = lift(log_gamma(0.5))?;
    let five = lift(log_gamma(5.0))?;
    let err = (half - 0.5 * std::f64::consts::PI.ln()).abs().max((five - 24f64.ln()).abs());
    ok_or(err < 1e-12, format!("max error {err:.1e}"), format!("error {err:.3e}"))
}

fn check_gg_variance() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for a in [0.1, 0.5, 1.0, 3.0] {
        worst = worst.max((lift(gg_variance(a, 2.0))? - a * a / 2.0).abs());
        worst = worst.max((lift(gg_variance(a, 1.0))? - 2.0 * a * a).abs());
    }
    ok_or(worst < 1e-12, format!("max error {worst:.1e}"), format!("error {worst:.3e}"))
}

fn check_nll_gradient() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grid = |lo: f64, hi: f64| ImageGrid::from_fn(3, 3, |_, _| rng.random_range(lo..hi));
    let (mean, scale, shape, target) = (grid(-1.0, 1.0), grid(0.3, 2.0), grid(0.8, 3.0), grid(-1.0, 1.0));
    let field = lift(GGFieldParams::new(mean.clone(), scale.clone(), shape.clone()))?;
    let (_, g) = lift(gg_nll_with_grad(&field, &target))?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        for i in 0..9 {
            let bump = |d: f64| {
                let mut p = [mean.clone(), scale.clone(), shape.clone()];
                p[which].as_mut_slice()[i] += d;
                let [m, a, b] = p;
                gg_nll(&GGFieldParams::new(m, a, b).expect("positive"), &target).expect("dims")
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = [&g.mean, &g.scale, &g.shape][which].as_slice()[i];
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
    }
    ok_or(worst < 1e-4, format!("max relative error {worst:.1e}"), format!("relative error {worst:.3e}"))
}

fn check_forward_variance() -> std::result::Result<String, String> {
    let sched = lift(make_schedule(20, 1e-4, 0.05))?;
    let b = lift(ModulationMask::new(ImageGrid::from_fn(2, 2, |r, c| 0.7 + 0.3 * (r + 2 * c) as f64)))?;
    let mut var = ImageGrid::zeros(2, 2);
    let mut worst: f64 = 0.0;
    for t in 1..=sched.steps() {
        let beta = sched.beta(t);
        var = lift(var.zip_map(b.grid(), |v, f| (1.0 - beta) * v + beta * f * f))?;
        let closed = lift(q_marginal_variance(t, &b, &sched))?;
        for (x, y) in var.as_slice().iter().zip(closed.as_slice()) {
            worst = worst.max((x - y).abs());
        }
    }
    // one Markov step with zero noise is a pure rescale
    let x = ImageGrid::filled(2, 2, 0.5);
    let stepped = lift(forward_step(&x, 1, &b, &ImageGrid::zeros(2, 2), &sched))?;
    let scale_err = (stepped.get(0, 0) - 0.5 * (1.0 - sched.beta(1)).sqrt()).abs();
    ok_or(
        worst < 1e-10 && scale_err < 1e-15,
        format!("max error {worst:.1e}"),
        format!("recursion error {worst:.3e}, step error {scale_err:.3e}"),
    )
}

fn check_refine() -> std::result::Result<String, String> {
    let cfg = RefineConfig {
        threshold: 0.5,
        threshold_mode: ThresholdMode::Fixed,
        ..RefineConfig::default()
    };
    let m = ImageGrid::from_fn(1, 1000, |_, c| c as f64 / 999.0);
    let b = lift(refine_mask(&lift(UncertaintyMask::new(m))?, &cfg))?;
    let (lo, hi) = cfg.bounds();
    let v = b.grid().as_slice();
    let in_bounds = v.iter().all(|&x| x >= lo && x <= hi);
    let monotone = v.windows(2).all(|w| w[1] >= w[0]);
    ok_or(
        in_bounds && monotone,
        format!("1000 points in [{lo}, {hi}], monotone"),
        format!("in_bounds={in_bounds} monotone={monotone}"),
    )
}

fn check_ause() -> std::result::Result<String, String> {
    let err = lift(ImageGrid::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]))?;
    let flat = ImageGrid::filled(1, 4, 0.5);
    let a = ause(&lift(sparsification(&flat, &err, 4))?).value;
    let perfect = ause(&lift(sparsification(&err, &err, 4))?).value;
    ok_or(
        (a - 0.45).abs() < 1e-12 && perfect == 0.0,
        format!("4-pixel area {a}"),
        format!("4-pixel area {a}, perfect {perfect}"),
    )
}

fn check_checkpoint() -> std::result::Result<String, String> {
    let net = lift(init_uncertainty_net(9, 4))?;
    let back = lift(decode_tensors(&encode_tensors(net.tensors())))?;
    ok_or(
        back.as_slice() == net.tensors(),
        format!("{} tensors bit-identical", back.len()),
        "round trip changed values".into(),
    )
}

/// Predicts the exact noise of a known residual.
struct Oracle<'a> {
    x0: &'a ImageGrid,
    sched: &'a DiffusionSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, x_t: &ImageGrid, t: usize, _: &ConditionBundle) -> Result<ImageGrid> {
        let ab = self.sched.alpha_bar(t);
        x_t.zip_map(self.x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
    }
}

fn check_oracle_inversion() -> std::result::Result<String, String> {
    let sched = lift(make_schedule(5, 1e-4, 0.05))?;
    let hr = ImageGrid::from_fn(8, 8, |r, c| 0.5 + 0.3 * ((r as f64) * 0.9).sin() * ((c as f64) * 0.7).cos());
    let lr = lift(degrade(&hr, 2))?;
    let x0 = lift(residual(&hr, &lift(upscale(&lr, 2))?))?;
    let encoder = lift(init_encoder(1, 2, false))?;
    let oracle = Oracle { x0: &x0, sched: &sched };
    let models = SrModels {
        predictor: &oracle,
        encoder: &encoder,
        bayes: None,
        schedule: &sched,
        refine: &RefineConfig::default(),
        guidance: Guidance::BASELINE,
    };
    let sr = lift(sample_sr_with(&lr, &models, 2, 0, StepNoise::Zero))?;
    let mae = lift(sr.zip_map(&hr, |a, b| (a - b).abs()))?.mean();
    ok_or(mae < 1e-6, format!("MAE {mae:.1e}"), format!("MAE {mae:.3e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
