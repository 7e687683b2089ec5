use proptest::prelude::*;

use buff::data::{bicubic_resize, degrade, upscale};
use buff::diffusion::{make_schedule, q_marginal_variance};
use buff::io::{decode_tensors, encode_tensors, load_checkpoint, save_checkpoint};
use buff::metrics::{ause, psnr, sparsification, ssim};
use buff::nn::{NamedTensor, NetworkParams};
use buff::refine::{refine_mask, ModulationMask, RefineConfig, ThresholdMode};
use buff::uncertainty::UncertaintyMask;
use buff::ImageGrid;

fn named_tensor(index: usize) -> impl Strategy<Value = NamedTensor> {
    prop::collection::vec(0usize..6, 0..4).prop_flat_map(move |shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n).prop_map(move |vals| {
            NamedTensor {
                name: format!("layer{index}.weight"),
                shape: shape.clone(),
                values: vals.into_iter().map(f64::from).collect(),
            }
        })
    })
}

fn tensor_set() -> impl Strategy<Value = Vec<NamedTensor>> {
    (1usize..5).prop_flat_map(|n| (0..n).map(named_tensor).collect::<Vec<_>>())
}

fn grid(h: usize, w: usize) -> impl Strategy<Value = ImageGrid> {
    prop::collection::vec(0.0f64..1.0, h * w).prop_map(move |v| ImageGrid::new(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn checkpoint_bytes_round_trip(tensors in tensor_set()) {
        let bytes = encode_tensors(&tensors);
        let back = decode_tensors(&bytes).unwrap();
        prop_assert_eq!(&back, &tensors);
        prop_assert_eq!(encode_tensors(&back), bytes);
    }

    #[test]
    fn checkpoint_file_round_trip(tensors in tensor_set()) {
        let mut params = NetworkParams::new();
        for t in tensors {
            params.push(t.name, t.shape, t.values).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &params).unwrap();
        prop_assert_eq!(load_checkpoint(&path).unwrap(), params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_is_symmetric(a in grid(6, 5), b in grid(6, 5)) {
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in grid(12, 13), b in grid(12, 13)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn ause_is_rank_invariant_and_nonnegative(unc in grid(7, 7), err in grid(7, 7)) {
        let base = ause(&sparsification(&unc, &err, 10).unwrap());
        prop_assert!(base.value >= -1e-12);
        let shifted = ause(&sparsification(&unc.map(|x| 2.0 * x + 5.0), &err, 10).unwrap());
        prop_assert!((shifted.value - base.value).abs() < 1e-12);
    }

    #[test]
    fn oracle_curve_minorizes(unc in grid(5, 8), err in grid(5, 8)) {
        let s = sparsification(&unc, &err, 8).unwrap();
        prop_assert_eq!(s.error_by_uncertainty[0], s.error_by_oracle[0]);
        for (u, o) in s.error_by_uncertainty.iter().zip(&s.error_by_oracle) {
            prop_assert!(o <= &(u + 1e-12));
        }
        prop_assert!(s.error_by_oracle.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn refined_mask_stays_in_bounds(
        m in prop::collection::vec(0.0f64..3.0, 1..50),
        k in 0.5f64..60.0,
        d1 in 1.0f64..2.0,
        d2 in 0.5f64..1.0,
        gamma in 0.0f64..0.9,
        threshold in 0.0f64..3.0,
        median in any::<bool>(),
    ) {
        let n = m.len();
        let cfg = RefineConfig {
            threshold,
            steepness: k,
            amp_base: d1,
            red_base: d2,
            intensity: gamma,
            threshold_mode: if median { ThresholdMode::PerImageMedian } else { ThresholdMode::Fixed },
        };
        let mask = UncertaintyMask::new(ImageGrid::new(1, n, m).unwrap()).unwrap();
        match refine_mask(&mask, &cfg) {
            Ok(b) => {
                let (lo, hi) = cfg.bounds();
                prop_assert!(b.grid().as_slice().iter().all(|&v| v >= lo && v <= hi && v > 0.0));
            }
            Err(_) => prop_assert!(d2 - gamma / 2.0 <= 0.0),
        }
    }

    #[test]
    fn marginal_variance_scales_with_mask_squared(
        b in prop::collection::vec(0.1f64..2.0, 1..20),
        t in 1usize..=50,
    ) {
        let sched = make_schedule(50, 1e-4, 0.05).unwrap();
        let n = b.len();
        let mask = ModulationMask::new(ImageGrid::new(1, n, b.clone()).unwrap()).unwrap();
        let v = q_marginal_variance(t, &mask, &sched).unwrap();
        let ab = sched.alpha_bar(t);
        for (vi, bi) in v.as_slice().iter().zip(&b) {
            prop_assert!((vi - (1.0 - ab) * bi * bi).abs() < 1e-15);
        }
    }

    #[test]
    fn resampling_preserves_constants(c in 0.0f64..1.0, side in 2usize..6) {
        let img = ImageGrid::filled(side * 4, side * 4, c);
        for scale in [2usize, 4] {
            let lr = degrade(&img, scale).unwrap();
            prop_assert!(lr.as_slice().iter().all(|v| (v - c).abs() < 1e-12));
            let up = upscale(&lr, scale).unwrap();
            prop_assert_eq!(up.dims(), img.dims());
            prop_assert!(up.as_slice().iter().all(|v| (v - c).abs() < 1e-12));
        }
        let odd = bicubic_resize(&img, side * 3, side + 1).unwrap();
        prop_assert!(odd.as_slice().iter().all(|v| (v - c).abs() < 1e-12));
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let clean = ImageGrid::from_fn(16, 16, |r, c| ((r + c) % 5) as f64 / 5.0);
    let unit: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values: Vec<f64> = [0.01, 0.05, 0.2]
        .iter()
        .map(|&amp| {
            let noisy = ImageGrid::new(16, 16, clean.as_slice().iter().zip(&unit).map(|(c, u)| c + amp * u).collect()).unwrap();
            psnr(&clean, &noisy, 1.0).unwrap()
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}
