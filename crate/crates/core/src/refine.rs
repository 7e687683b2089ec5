//! Turning the raw variance mask into the per-pixel noise modulation factor.

use crate::error::{config_err, domain_err, Result};
use crate::grid::ImageGrid;
use crate::nn::sigmoid;
use crate::uncertainty::UncertaintyMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Use `RefineConfig::threshold` as given.
    Fixed,
    /// Replace the threshold with the median of each mask.
    PerImageMedian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub threshold: f64,
    pub steepness: f64,
    pub amp_base: f64,
    pub red_base: f64,
    pub intensity: f64,
    pub threshold_mode: ThresholdMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            steepness: 10.0,
            amp_base: 1.2,
            red_base: 0.85,
            intensity: 0.4,
            threshold_mode: ThresholdMode::PerImageMedian,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steepness > 0.0) {
            return Err(config_err("refine steepness k must be > 0"));
        }
        if !(self.amp_base >= 1.0 && 1.0 >= self.red_base && self.red_base > 0.0) {
            return Err(config_err(format!(
                "need amp_base >= 1 >= red_base > 0 (got {}, {})",
                self.amp_base, self.red_base
            )));
        }
        if !(self.intensity >= 0.0) {
            return Err(config_err("refine intensity must be >= 0"));
        }
        if !(self.red_base - 0.5 * self.intensity > 0.0) {
            return Err(config_err(format!(
                "red_base - intensity/2 = {} leaves a nonpositive mask",
                self.red_base - 0.5 * self.intensity
            )));
        }
        Ok(())
    }

    /// Smallest and largest factor a refined mask can contain.
    pub fn bounds(&self) -> (f64, f64) {
        (
            self.red_base - 0.5 * self.intensity,
            self.amp_base + 0.5 * self.intensity,
        )
    }
}

/// Strictly positive per-pixel noise factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMask(ImageGrid);

impl ModulationMask {
    pub fn new(grid: ImageGrid) -> Result<Self> {
        if grid.as_slice().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(domain_err("modulation mask entries must be finite and > 0"));
        }
        Ok(Self(grid))
    }

    /// The identity mask.
    pub fn ones(height: usize, width: usize) -> Self {
        Self(ImageGrid::filled(height, width, 1.0))
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// `sigmoid((M_i - threshold) * steepness)` per pixel.
pub fn adjustment_factor(mask: &UncertaintyMask, threshold: f64, steepness: f64) -> ImageGrid {
    mask.grid().map(|m| sigmoid((m - threshold) * steepness))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Threshold actually used for `mask` under `cfg`.
pub fn effective_threshold(mask: &UncertaintyMask, cfg: &RefineConfig) -> f64 {
    match cfg.threshold_mode {
        ThresholdMode::Fixed => cfg.threshold,
        ThresholdMode::PerImageMedian => median(mask.grid().as_slice()),
    }
}

/// Piecewise amplification above the threshold and reduction at or below it.
/// The result is the deterministic factor only; noise is applied separately
/// by [`modulate_noise`].
pub fn refine_mask(mask: &UncertaintyMask, cfg: &RefineConfig) -> Result<ModulationMask> {
    cfg.validate()?;
    let alpha = effective_threshold(mask, cfg);
    let factors = mask.grid().map(|m| {
        let a = sigmoid((m - alpha) * cfg.steepness);
        if m > alpha {
            cfg.amp_base + (a - 0.5) * cfg.intensity
        } else {
            cfg.red_base - (0.5 - a) * cfg.intensity
        }
    });
    ModulationMask::new(factors)
}

/// Elementwise `noise * B`.
pub fn modulate_noise(noise: &ImageGrid, b: &ModulationMask) -> Result<ImageGrid> {
    noise.zip_map(b.grid(), |n, f| n * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(values: Vec<f64>) -> UncertaintyMask {
        let n = values.len();
        UncertaintyMask::new(ImageGrid::new(1, n, values).unwrap()).unwrap()
    }

    fn fixed(threshold: f64) -> RefineConfig {
        RefineConfig {
            threshold,
            threshold_mode: ThresholdMode::Fixed,
            ..RefineConfig::default()
        }
    }

    #[test]
    fn adjustment_examples() {
        let m = mask(vec![0.3, 0.4, 1e6]);
        let a = adjustment_factor(&m, 0.3, 10.0);
        assert_eq!(a.as_slice()[0], 0.5);
        assert!((a.as_slice()[1] - 0.7310585786).abs() < 1e-10);
        assert!((a.as_slice()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refine_examples() {
        let cfg = fixed(1e3);
        let b = refine_mask(&mask(vec![1e3 + 1e-9, 0.0]), &cfg).unwrap();
        assert!((b.grid().as_slice()[0] - 1.2).abs() < 1e-9);
        assert!((b.grid().as_slice()[1] - 0.65).abs() < 1e-12);

        let uniform = mask(vec![0.1; 6]);
        let b = refine_mask(&uniform, &fixed(0.5)).unwrap();
        let expect = 0.85 - (0.5 - sigmoid((0.1 - 0.5) * 10.0)) * 0.4;
        assert!(b.grid().as_slice().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        let mut c = RefineConfig::default();
        assert!(c.validate().is_ok());
        c.intensity = 1.8;
        assert!(c.validate().is_err());
        c = RefineConfig { steepness: 0.0, ..RefineConfig::default() };
        assert!(c.validate().is_err());
        c = RefineConfig { amp_base: 0.9, ..RefineConfig::default() };
        assert!(c.validate().is_err());
        c = RefineConfig { red_base: 1.1, ..RefineConfig::default() };
        assert!(refine_mask(&mask(vec![1.0]), &c).is_err());
    }

    #[test]
    fn median_threshold_splits_mask() {
        let m = mask(vec![0.1, 0.5, 0.3, 0.7]);
        let b = refine_mask(&m, &RefineConfig::default()).unwrap();
        let amplified: Vec<bool> = b.grid().as_slice().iter().map(|&v| v > 1.0).collect();
        assert_eq!(amplified, vec![false, true, false, true]);
    }

    #[test]
    fn modulate_noise_examples() {
        let noise = ImageGrid::from_fn(3, 3, |r, c| r as f64 - c as f64 * 0.5);
        assert_eq!(modulate_noise(&noise, &ModulationMask::ones(3, 3)).unwrap(), noise);
        let zero = ImageGrid::zeros(3, 3);
        let b = ModulationMask::new(ImageGrid::filled(3, 3, 1.3)).unwrap();
        assert_eq!(modulate_noise(&zero, &b).unwrap(), zero);
        let c = ImageGrid::filled(3, 3, 0.7);
        assert_eq!(modulate_noise(&c, &b).unwrap(), ImageGrid::filled(3, 3, 0.7 * 1.3));
        assert!(modulate_noise(&ImageGrid::zeros(2, 3), &b).is_err());
    }

    #[test]
    fn masks_reject_bad_entries() {
        assert!(ModulationMask::new(ImageGrid::filled(2, 2, 0.0)).is_err());
        assert!(UncertaintyMask::new(ImageGrid::filled(2, 2, -1e-3)).is_err());
    }
}
