use super::schedule::DiffusionSchedule;
use crate::error::Result;
use crate::grid::ImageGrid;
use crate::refine::ModulationMask;

/// Closed-form forward sample `sqrt(abar_t) x0 + sqrt(1 - abar_t) (eps * B)`.
pub fn q_sample(
    x0: &ImageGrid,
    t: usize,
    b: &ModulationMask,
    eps: &ImageGrid,
    sched: &DiffusionSchedule,
) -> Result<ImageGrid> {
    sched.check_step(t)?;
    x0.ensure_same_dims(eps)?;
    x0.ensure_same_dims(b.grid())?;
    let signal = sched.alpha_bar(t).sqrt();
    let noise = (1.0 - sched.alpha_bar(t)).sqrt();
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .zip(b.grid().as_slice())
        .map(|((&x, &e), &f)| signal * x + noise * (e * f))
        .collect();
    ImageGrid::new(x0.height(), x0.width(), data)
}

/// Per-pixel forward marginal variance `(1 - abar_t) B^2`.
pub fn q_marginal_variance(t: usize, b: &ModulationMask, sched: &DiffusionSchedule) -> Result<ImageGrid> {
    sched.check_step(t)?;
    let scale = 1.0 - sched.alpha_bar(t);
    Ok(b.grid().map(|f| scale * (f * f)))
}

/// One forward Markov step `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) (eps * B)`.
pub fn forward_step(
    x_prev: &ImageGrid,
    t: usize,
    b: &ModulationMask,
    eps: &ImageGrid,
    sched: &DiffusionSchedule,
) -> Result<ImageGrid> {
    sched.check_step(t)?;
    x_prev.ensure_same_dims(eps)?;
    x_prev.ensure_same_dims(b.grid())?;
    let keep = sched.alpha(t).sqrt();
    let add = sched.beta(t).sqrt();
    let data = x_prev
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .zip(b.grid().as_slice())
        .map(|((&x, &e), &f)| keep * x + add * (e * f))
        .collect();
    ImageGrid::new(x_prev.height(), x_prev.width(), data)
}

/// Reverse step: posterior mean from the predicted (modulated) noise plus
/// `sqrt(beta_tilde_t) (z * B)`. Pass a zero `z` for the final step.
pub fn posterior_step(
    x_t: &ImageGrid,
    t: usize,
    eps_hat: &ImageGrid,
    b: &ModulationMask,
    z: &ImageGrid,
    sched: &DiffusionSchedule,
) -> Result<ImageGrid> {
    sched.check_step(t)?;
    x_t.ensure_same_dims(eps_hat)?;
    x_t.ensure_same_dims(z)?;
    x_t.ensure_same_dims(b.grid())?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.posterior_beta(t).sqrt();
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .zip(z.as_slice().iter().zip(b.grid().as_slice()))
        .map(|((&x, &e), (&zi, &f))| inv_sqrt_alpha * (x - eps_coef * e) + sigma * (zi * f))
        .collect();
    ImageGrid::new(x_t.height(), x_t.width(), data)
}

/// `hr - lr_up`, the quantity the diffusion chain models.
pub fn residual(hr: &ImageGrid, lr_up: &ImageGrid) -> Result<ImageGrid> {
    hr.zip_map(lr_up, |h, l| h - l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn sched_with_abar(abar: f64) -> DiffusionSchedule {
        DiffusionSchedule::from_betas(vec![1.0 - abar]).unwrap()
    }

    #[test]
    fn q_sample_examples() {
        let s = sched_with_abar(0.75);
        let zero = ImageGrid::zeros(2, 3);
        let ones = ImageGrid::filled(2, 3, 1.0);
        let b1 = ModulationMask::ones(2, 3);
        let out = q_sample(&zero, 1, &b1, &ones, &s).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let x0 = ImageGrid::from_fn(2, 3, |r, c| 0.1 * (r + 2 * c) as f64);
        let clean = q_sample(&x0, 1, &b1, &zero, &s).unwrap();
        assert_eq!(clean, x0.map(|v| 0.75f64.sqrt() * v));

        let b2 = ModulationMask::new(ImageGrid::filled(2, 3, 2.0)).unwrap();
        let n1 = q_sample(&zero, 1, &b1, &x0, &s).unwrap();
        let n2 = q_sample(&zero, 1, &b2, &x0, &s).unwrap();
        assert_eq!(n2, n1.map(|v| 2.0 * v));
        assert!(q_sample(&x0, 2, &b1, &zero, &s).is_err());
    }

    #[test]
    fn marginal_variance_examples() {
        let s = sched_with_abar(0.75);
        let v = q_marginal_variance(1, &ModulationMask::ones(2, 2), &s).unwrap();
        assert!(v.as_slice().iter().all(|x| (x - 0.25).abs() < 1e-15));
        let mut g = ImageGrid::filled(2, 2, 1.0);
        g.set(0, 1, 1.2);
        let v = q_marginal_variance(1, &ModulationMask::new(g).unwrap(), &s).unwrap();
        assert!((v.get(0, 1) / v.get(0, 0) - 1.44).abs() < 1e-12);
        assert!(q_marginal_variance(0, &ModulationMask::ones(1, 1), &s).is_err());
    }

    #[test]
    fn marginal_variance_equals_stepwise_recursion() {
        let s = make_schedule(50, 1e-3, 0.08).unwrap();
        let g = ImageGrid::from_fn(3, 3, |r, c| 0.7 + 0.1 * (r * 3 + c) as f64);
        let b = ModulationMask::new(g.clone()).unwrap();
        let mut v = ImageGrid::zeros(3, 3);
        for t in 1..=50 {
            v = v
                .zip_map(&g, |prev, f| (1.0 - s.beta(t)) * prev + s.beta(t) * f * f)
                .unwrap();
            let closed = q_marginal_variance(t, &b, &s).unwrap();
            for (a, c) in v.as_slice().iter().zip(closed.as_slice()) {
                assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn posterior_inverts_single_step() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let x0 = ImageGrid::from_fn(4, 4, |r, c| (r as f64 - c as f64) * 0.05);
        let eps = ImageGrid::from_fn(4, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let b = ModulationMask::new(ImageGrid::from_fn(4, 4, |r, _| 0.8 + 0.1 * r as f64)).unwrap();
        let x1 = q_sample(&x0, 1, &b, &eps, &s).unwrap();
        let eps_b = crate::refine::modulate_noise(&eps, &b).unwrap();
        let back = posterior_step(&x1, 1, &eps_b, &b, &ImageGrid::zeros(4, 4), &s).unwrap();
        for (a, c) in back.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_in_small_beta_limit() {
        let s = DiffusionSchedule::from_betas(vec![1e-12, 1e-12]).unwrap();
        let x = ImageGrid::filled(2, 2, 0.3);
        let out = posterior_step(&x, 2, &ImageGrid::filled(2, 2, 1.0), &ModulationMask::ones(2, 2), &ImageGrid::zeros(2, 2), &s)
            .unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-5));
    }

    #[test]
    fn residual_round_trip() {
        let hr = ImageGrid::from_fn(3, 3, |r, c| 0.1 * r as f64 + 0.03 * c as f64);
        let up = ImageGrid::from_fn(3, 3, |r, _| 0.05 * r as f64);
        assert_eq!(residual(&hr, &hr).unwrap(), ImageGrid::zeros(3, 3));
        let res = residual(&hr, &up).unwrap();
        let back = up.zip_map(&res, |a, b| a + b).unwrap();
        for (a, b) in back.as_slice().iter().zip(hr.as_slice()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let shifted = hr.map(|v| v + 0.25);
        let r = residual(&shifted, &hr).unwrap();
        assert!(r.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(residual(&hr, &ImageGrid::zeros(2, 3)).is_err());
    }
}
