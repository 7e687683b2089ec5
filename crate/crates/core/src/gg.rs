//! Generalized Gaussian distribution: density, heteroscedastic NLL, closed-form
//! variance and sampling, plus the special functions they need.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{domain_err, Result};
use crate::grid::ImageGrid;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function for `x > 0`.
///
/// Lanczos approximation (g = 7, nine coefficients) with the reflection
/// formula below 0.5.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain_err(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma_pos(x))
}

fn ln_gamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // Gamma(x) Gamma(1-x) = pi / sin(pi x); sin is positive on (0, 0.5).
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma_pos(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    HALF_LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function for `x > 0`: upward recurrence to `x >= 10`, then the
/// asymptotic series.
pub fn digamma(x: f64) -> f64 {
    let mut x = x;
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    shift + x.ln() - 0.5 * inv - series
}

/// Parameters of a single generalized Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GGParams {
    mean: f64,
    scale: f64,
    shape: f64,
}

impl GGParams {
    pub fn new(mean: f64, scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0) || !(shape > 0.0) || !mean.is_finite() {
            return Err(domain_err(format!(
                "generalized Gaussian needs scale > 0 and shape > 0 (got scale={scale}, shape={shape})"
            )));
        }
        Ok(Self { mean, scale, shape })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }
}

/// Per-pixel generalized Gaussian parameter maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GGFieldParams {
    mean: ImageGrid,
    scale: ImageGrid,
    shape: ImageGrid,
}

impl GGFieldParams {
    pub fn new(mean: ImageGrid, scale: ImageGrid, shape: ImageGrid) -> Result<Self> {
        mean.ensure_same_dims(&scale)?;
        mean.ensure_same_dims(&shape)?;
        if scale.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(domain_err("scale grid must be strictly positive"));
        }
        if shape.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(domain_err("shape grid must be strictly positive"));
        }
        Ok(Self { mean, scale, shape })
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn scale(&self) -> &ImageGrid {
        &self.scale
    }

    pub fn shape(&self) -> &ImageGrid {
        &self.shape
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mean.dims()
    }

    pub fn pixel(&self, i: usize) -> GGParams {
        GGParams {
            mean: self.mean.as_slice()[i],
            scale: self.scale.as_slice()[i],
            shape: self.shape.as_slice()[i],
        }
    }
}

/// `ln[shape / (2 scale Gamma(1/shape))] - (|mean - y| / scale)^shape`
pub fn gg_log_pdf(y: f64, p: &GGParams) -> f64 {
    let z = (p.mean - y).abs() / p.scale;
    p.shape.ln() - std::f64::consts::LN_2 - p.scale.ln() - ln_gamma_pos(1.0 / p.shape) - z.powf(p.shape)
}

#[inline]
fn pixel_nll(diff: f64, scale: f64, shape: f64) -> f64 {
    (diff.abs() / scale).powf(shape) - (shape / scale).ln() + ln_gamma_pos(1.0 / shape)
}

/// Mean over pixels of `(|mean - y| / scale)^shape - ln(shape / scale) + lnGamma(1 / shape)`.
pub fn gg_nll(params: &GGFieldParams, target: &ImageGrid) -> Result<f64> {
    params.mean.ensure_same_dims(target)?;
    let n = target.len() as f64;
    let sum: f64 = (0..target.len())
        .map(|i| {
            let p = params.pixel(i);
            pixel_nll(p.mean - target.as_slice()[i], p.scale, p.shape)
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`gg_nll`] with respect to each parameter map.
#[derive(Debug, Clone, PartialEq)]
pub struct GGFieldGrad {
    pub mean: ImageGrid,
    pub scale: ImageGrid,
    pub shape: ImageGrid,
}

/// [`gg_nll`] together with its analytic gradient. At `mean == y` the
/// derivative of the `|.|` term is taken as zero.
pub fn gg_nll_with_grad(params: &GGFieldParams, target: &ImageGrid) -> Result<(f64, GGFieldGrad)> {
    params.mean.ensure_same_dims(target)?;
    let (h, w) = target.dims();
    let n = target.len();
    let inv_n = 1.0 / n as f64;
    let mut g_mean = vec![0.0; n];
    let mut g_scale = vec![0.0; n];
    let mut g_shape = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let p = params.pixel(i);
        let d = p.mean - target.as_slice()[i];
        let (a, b) = (p.scale, p.shape);
        total += pixel_nll(d, a, b);

        let u = d.abs() / a;
        let ub = if u > 0.0 { u.powf(b) } else { 0.0 };
        g_mean[i] = if d != 0.0 {
            b * ub / u * d.signum() / a * inv_n
        } else {
            0.0
        };
        g_scale[i] = (1.0 - b * ub) / a * inv_n;
        let ulnu = if u > 0.0 { ub * u.ln() } else { 0.0 };
        g_shape[i] = (ulnu - 1.0 / b - digamma(1.0 / b) / (b * b)) * inv_n;
    }
    let grad = GGFieldGrad {
        mean: ImageGrid::new(h, w, g_mean)?,
        scale: ImageGrid::new(h, w, g_scale)?,
        shape: ImageGrid::new(h, w, g_shape)?,
    };
    Ok((total * inv_n, grad))
}

/// Closed-form variance `scale^2 Gamma(3/shape) / Gamma(1/shape)`.
pub fn gg_variance(scale: f64, shape: f64) -> Result<f64> {
    if !(scale > 0.0) || !(shape > 0.0) {
        return Err(domain_err(format!(
            "gg_variance needs positive scale and shape (got {scale}, {shape})"
        )));
    }
    Ok(variance_unchecked(scale, shape))
}

#[inline]
pub(crate) fn variance_unchecked(scale: f64, shape: f64) -> f64 {
    scale * scale * (ln_gamma_pos(3.0 / shape) - ln_gamma_pos(1.0 / shape)).exp()
}

/// Draw from the generalized Gaussian: `mean ± scale * G^(1/shape)` with
/// `G ~ Gamma(1/shape, 1)` and a fair random sign.
pub fn gg_sample<R: Rng + ?Sized>(p: &GGParams, rng: &mut R) -> f64 {
    let gamma = Gamma::new(1.0 / p.shape, 1.0).expect("shape validated at construction");
    let g: f64 = gamma.sample(rng);
    let magnitude = p.scale * g.powf(1.0 / p.shape);
    if rng.random::<bool>() {
        p.mean + magnitude
    } else {
        p.mean - magnitude
    }
}
