//! Image fidelity (PSNR, SSIM) and uncertainty calibration (sparsification
//! curves, AUSE).

use crate::error::{domain_err, shape_err, Result};
use crate::grid::ImageGrid;

/// `10 log10(peak^2 / MSE)`; `+inf` for identical grids.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if !(peak > 0.0) {
        return Err(domain_err(format!("psnr peak must be > 0, got {peak}")));
    }
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows, peak 1.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(format!("ssim needs at least 11x11 input, got {h}x{w}")));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let x = a.get(r + dy, c + dx);
                    let y = b.get(r + dy, c + dx);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Remaining mean absolute error as pixels are removed in order of
/// decreasing uncertainty, against the oracle order of decreasing error.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsificationCurve {
    pub fractions: Vec<f64>,
    pub error_by_uncertainty: Vec<f64>,
    pub error_by_oracle: Vec<f64>,
}

fn removal_curve(ranking: &[f64], errors: &[f64], fractions: &[f64]) -> Vec<f64> {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Highest score first; ties removed lowest index first.
    order.sort_by(|&i, &j| ranking[j].total_cmp(&ranking[i]).then(i.cmp(&j)));
    // suffix[k] = sum of errors of the pixels that survive removing k
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + errors[order[k]];
    }
    fractions
        .iter()
        .map(|&f| {
            let removed = ((f * n as f64).floor() as usize).min(n - 1);
            if removed == 0 {
                // same summation order for both curves
                errors.iter().sum::<f64>() / n as f64
            } else {
                suffix[removed] / (n - removed) as f64
            }
        })
        .collect()
}

/// Sparsification at removal fractions `k / steps`, `k = 0..steps`.
pub fn sparsification(uncertainty: &ImageGrid, abs_error: &ImageGrid, steps: usize) -> Result<SparsificationCurve> {
    uncertainty.ensure_same_dims(abs_error)?;
    if steps < 2 {
        return Err(domain_err(format!("sparsification needs >= 2 steps, got {steps}")));
    }
    if abs_error.is_empty() {
        return Err(shape_err("sparsification of an empty grid"));
    }
    let fractions: Vec<f64> = (0..steps).map(|k| k as f64 / steps as f64).collect();
    let errors = abs_error.as_slice();
    Ok(SparsificationCurve {
        error_by_uncertainty: removal_curve(uncertainty.as_slice(), errors, &fractions),
        error_by_oracle: removal_curve(errors, errors, &fractions),
        fractions,
    })
}

/// Area under the sparsification error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ause {
    pub value: f64,
    /// False when the full-set error is zero and the area is undefined.
    pub defined: bool,
}

/// Trapezoidal area between the uncertainty and oracle curves, each
/// normalised by the full-set error.
pub fn ause(curve: &SparsificationCurve) -> Ause {
    let full = curve.error_by_uncertainty[0];
    if full == 0.0 {
        return Ause { value: 0.0, defined: false };
    }
    let gap: Vec<f64> = curve
        .error_by_uncertainty
        .iter()
        .zip(&curve.error_by_oracle)
        .map(|(u, o)| (u - o) / full)
        .collect();
    let value = curve
        .fractions
        .windows(2)
        .zip(gap.windows(2))
        .map(|(f, g)| 0.5 * (f[1] - f[0]) * (g[0] + g[1]))
        .sum();
    Ause { value, defined: true }
}

/// Reference AUSE tiers used to label mask quality in reports.
pub const AUSE_TIERS: [(f64, &str); 3] = [(0.121, "high"), (0.217, "medium"), (0.308, "low")];

/// Label of the nearest reference tier.
pub fn mask_quality_label(ause: f64) -> &'static str {
    AUSE_TIERS
        .iter()
        .min_by(|a, b| (a.0 - ause).abs().total_cmp(&(b.0 - ause).abs()))
        .map(|t| t.1)
        .expect("non-empty tiers")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0);
        assert!(psnr(&a, &b, 1.0).unwrap().abs() < 1e-12);
        let c = a.map(|v| v + 0.1);
        assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageGrid::zeros(3, 4), 1.0).is_err());
        assert!(psnr(&a, &c, 0.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = ImageGrid::from_fn(16, 16, |r, c| ((r / 2 + c / 2) % 2) as f64);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        let b = ImageGrid::from_fn(16, 16, |r, c| (r as f64 * 0.3 + c as f64 * 0.1).sin() * 0.5 + 0.5);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&ImageGrid::zeros(10, 16), &ImageGrid::zeros(10, 16)).is_err());
    }

    #[test]
    fn four_pixel_sparsification() {
        let err = ImageGrid::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = ImageGrid::filled(1, 4, 0.5);
        let s = sparsification(&flat, &err, 4).unwrap();
        assert_eq!(s.fractions, vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(s.error_by_uncertainty[0], 2.5);
        assert_eq!(s.error_by_oracle[0], 2.5);
        assert_eq!(s.error_by_uncertainty[2], 3.5);
        assert_eq!(s.error_by_oracle[2], 1.5);
    }

    #[test]
    fn perfect_uncertainty_has_zero_area() {
        let err = ImageGrid::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let s = sparsification(&err, &err, 10).unwrap();
        assert_eq!(s.error_by_uncertainty, s.error_by_oracle);
        let a = ause(&s);
        assert!(a.defined);
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn zero_error_is_flagged() {
        let z = ImageGrid::zeros(3, 3);
        let a = ause(&sparsification(&ImageGrid::filled(3, 3, 1.0), &z, 4).unwrap());
        assert!(!a.defined);
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn tier_labels() {
        assert_eq!(mask_quality_label(0.10), "high");
        assert_eq!(mask_quality_label(0.121), "high");
        assert_eq!(mask_quality_label(0.2), "medium");
        assert_eq!(mask_quality_label(0.308), "low");
        assert_eq!(mask_quality_label(0.9), "low");
    }
}
