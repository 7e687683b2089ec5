//! Synthetic dataset generation, bicubic resampling and co-registered patch
//! cropping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::grid::ImageGrid;
use crate::uncertainty::UncertaintyMask;

/// Relative weights of the four texture generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureMix {
    pub smooth: f64,
    pub grating: f64,
    pub blobs: f64,
    pub checker: f64,
}

impl TextureMix {
    pub const UNIFORM: TextureMix = TextureMix {
        smooth: 1.0,
        grating: 1.0,
        blobs: 1.0,
        checker: 1.0,
    };

    fn weights(&self) -> [f64; 4] {
        [self.smooth, self.grating, self.blobs, self.checker]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub scale_factor: usize,
    pub texture_mix: TextureMix,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err("dataset count must be >= 1"));
        }
        if self.size < 16 {
            return Err(config_err(format!("image size must be >= 16, got {}", self.size)));
        }
        if self.scale_factor == 0 || self.size % self.scale_factor != 0 {
            return Err(config_err(format!(
                "image size {} not divisible by scale factor {}",
                self.size, self.scale_factor
            )));
        }
        let w = self.texture_mix.weights();
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(config_err("texture mix weights must be nonnegative and not all zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Generator {
    Smooth,
    Grating,
    Blobs,
    Checker,
}

fn pick_generator(rng: &mut ChaCha8Rng, mix: &TextureMix) -> Generator {
    let w = mix.weights();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let all = [Generator::Smooth, Generator::Grating, Generator::Blobs, Generator::Checker];
    for (g, wi) in all.iter().zip(w) {
        if wi > 0.0 && u < wi {
            return *g;
        }
        u -= wi;
    }
    // Rounding can leave u marginally above the last bucket.
    let last = w.iter().rposition(|&v| v > 0.0).expect("validated nonzero mix");
    all[last]
}

fn render(gen: Generator, n: usize, rng: &mut ChaCha8Rng) -> ImageGrid {
    let size = n as f64;
    match gen {
        Generator::Smooth => {
            let base = rng.random_range(0.25..0.75);
            let amp = rng.random_range(-0.4..0.4);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let curve = rng.random_range(-0.15..0.15);
            let (ct, st) = (theta.cos(), theta.sin());
            ImageGrid::from_fn(n, n, |r, c| {
                let u = (c as f64 * ct + r as f64 * st) / size;
                let v = (r as f64 - size / 2.0) / size;
                base + amp * u + curve * v * v * 4.0
            })
        }
        Generator::Grating => {
            let period = rng.random_range(3.0..8.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.25..0.45);
            let (ct, st) = (theta.cos(), theta.sin());
            ImageGrid::from_fn(n, n, |r, c| {
                let u = c as f64 * ct + r as f64 * st;
                0.5 + amp * (std::f64::consts::TAU * u / period + phase).sin()
            })
        }
        Generator::Blobs => {
            let k = rng.random_range(3..=6);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(0.0..size),
                        rng.random_range(0.0..size),
                        rng.random_range(1.5..5.0),
                        rng.random_range(-0.35..0.35),
                    )
                })
                .collect();
            ImageGrid::from_fn(n, n, |r, c| {
                0.5 + blobs
                    .iter()
                    .map(|&(br, bc, s, a)| {
                        let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum::<f64>()
            })
        }
        Generator::Checker => {
            let cell = rng.random_range(3..=6);
            let lo = rng.random_range(0.1..0.3);
            let hi = lo + rng.random_range(0.5..0.65);
            let (dr, dc) = (rng.random_range(0..cell), rng.random_range(0..cell));
            ImageGrid::from_fn(n, n, |r, c| {
                if ((r + dr) / cell + (c + dc) / cell) % 2 == 0 {
                    lo
                } else {
                    hi
                }
            })
        }
    }
}

fn gen_image(spec: &DatasetSpec, index: usize) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = spec.size;
    let size = n as f64;
    let first = pick_generator(&mut rng, &spec.texture_mix);
    let mut img = render(first, n, &mut rng);
    for _ in 0..2 {
        let gen = pick_generator(&mut rng, &spec.texture_mix);
        let layer = render(gen, n, &mut rng);
        let (cr, cc) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let radius = rng.random_range(0.25..0.5) * size;
        for r in 0..n {
            for c in 0..n {
                let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                let t = 1.0 / (1.0 + (-(radius - d)).exp());
                let v = img.get(r, c) * (1.0 - t) + layer.get(r, c) * t;
                img.set(r, c, v);
            }
        }
    }
    img.clamp(0.0, 1.0)
}

/// Deterministic synthetic HR images with values in `[0, 1]`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<ImageGrid>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| gen_image(spec, i)).collect())
}

/// Anisotropic total variation, used to characterise texture content.
pub fn total_variation(img: &ImageGrid) -> f64 {
    let (h, w) = img.dims();
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                tv += (img.get(r, c + 1) - img.get(r, c)).abs();
            }
            if r + 1 < h {
                tv += (img.get(r + 1, c) - img.get(r, c)).abs();
            }
        }
    }
    tv
}

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output sample along one axis.
/// Downscaling widens the kernel by the inverse scale (antialiasing).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) * kscale);
                if w != 0.0 {
                    idx.push(j.clamp(0, in_len as isize - 1) as usize);
                    wts.push(w);
                }
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= sum);
            (idx, wts)
        })
        .collect()
}

/// Separable cubic-convolution resize (a = -0.5) with edge replication.
pub fn bicubic_resize(img: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("bicubic_resize output dimensions must be >= 1"));
    }
    let (h, w) = img.dims();
    let col_w = axis_weights(w, out_w);
    let row_w = axis_weights(h, out_h);
    let mut tmp = vec![0.0; h * out_w];
    for r in 0..h {
        let row = img.row(r);
        for (c, (idx, wts)) in col_w.iter().enumerate() {
            tmp[r * out_w + c] = idx.iter().zip(wts).map(|(&j, &wt)| wt * row[j]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (r, (idx, wts)) in row_w.iter().enumerate() {
        for c in 0..out_w {
            out[r * out_w + c] = idx
                .iter()
                .zip(wts)
                .map(|(&j, &wt)| wt * tmp[j * out_w + c])
                .sum();
        }
    }
    ImageGrid::new(out_h, out_w, out)
}

/// Bicubic downsample by an integer factor.
pub fn degrade(hr: &ImageGrid, scale_factor: usize) -> Result<ImageGrid> {
    let (h, w) = hr.dims();
    if scale_factor == 0 || h % scale_factor != 0 || w % scale_factor != 0 {
        return Err(shape_err(format!(
            "{h}x{w} image not divisible by scale factor {scale_factor}"
        )));
    }
    bicubic_resize(hr, h / scale_factor, w / scale_factor)
}

/// Bicubic upscale of an LR image by an integer factor.
pub fn upscale(lr: &ImageGrid, scale_factor: usize) -> Result<ImageGrid> {
    bicubic_resize(lr, lr.height() * scale_factor, lr.width() * scale_factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub row: usize,
    pub col: usize,
    pub lr: ImageGrid,
    pub hr: ImageGrid,
    pub mask: UncertaintyMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub triples: Vec<PatchTriple>,
    pub patch_size: usize,
    pub stride: usize,
}

/// Aligned sliding-window crops of an HR image, its LR counterpart and its
/// HR-resolution mask.
pub fn crop_patches(
    hr: &ImageGrid,
    lr: &ImageGrid,
    mask: &UncertaintyMask,
    patch: usize,
    stride: usize,
) -> Result<PatchSet> {
    hr.ensure_same_dims(mask.grid())?;
    let (h, w) = hr.dims();
    let (lh, lw) = lr.dims();
    if lh == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return Err(shape_err(format!("HR {h}x{w} is not an integer multiple of LR {lh}x{lw}")));
    }
    let scale = h / lh;
    if patch == 0 || stride == 0 || patch % scale != 0 || stride % scale != 0 {
        return Err(shape_err(format!(
            "patch {patch} and stride {stride} must be positive multiples of scale {scale}"
        )));
    }
    if patch > h || patch > w {
        return Err(shape_err(format!("patch {patch} exceeds image {h}x{w}")));
    }
    let lp = patch / scale;
    let mut triples = Vec::new();
    for r in (0..=h - patch).step_by(stride) {
        for c in (0..=w - patch).step_by(stride) {
            triples.push(PatchTriple {
                row: r,
                col: c,
                lr: lr.crop(r / scale, c / scale, lp, lp)?,
                hr: hr.crop(r, c, patch, patch)?,
                mask: UncertaintyMask::new(mask.grid().crop(r, c, patch, patch)?)?,
            });
        }
    }
    Ok(PatchSet {
        triples,
        patch_size: patch,
        stride,
    })
}
