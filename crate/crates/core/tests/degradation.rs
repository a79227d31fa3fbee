mod common;

use std::f64::consts::PI;

use common::oracles;
use dssr::degradation::{
    blur, degrade, direct_downsample, gaussian8_set, gaussian8_widths, make_anisotropic_kernel, make_isotropic_kernel,
    sample_training_spec, BlurKernel, DegradationSpec, Downsampler, KernelKind, ISOTROPIC_SIZE,
};
use dssr::imaging::{bicubic_resize, ColorSpace, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, ColorSpace::Rgb, |_, _, _| rng.random::<f64>()).unwrap()
}

fn check_kernel(k: &BlurKernel) -> Result<(), TestCaseError> {
    prop_assert!(k.weights().iter().all(|&v| v >= 0.0));
    prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-8);
    prop_assert_eq!(k.size() % 2, 1);
    Ok(())
}

#[test]
fn isotropic_matches_bruteforce_gaussian() {
    for &(size, sigma) in &[(21, 0.2), (21, 1.3), (11, 2.7), (3, 0.9)] {
        let k = make_isotropic_kernel(size, sigma).unwrap();
        let reference = oracles::gaussian_reference(size, sigma);
        for (a, b) in k.weights().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    let narrow = make_isotropic_kernel(21, 0.2).unwrap();
    assert!(narrow.weight(10, 10) >= 0.99);
}

#[test]
fn isotropic_rejects_bad_arguments() {
    assert!(make_isotropic_kernel(20, 1.0).is_err());
    assert!(make_isotropic_kernel(21, 0.0).is_err());
    assert!(make_isotropic_kernel(21, -1.0).is_err());
}

#[test]
fn anisotropic_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let iso = make_isotropic_kernel(11, 1.7).unwrap();
    let an = make_anisotropic_kernel(11, 1.7, 1.7, 0.4, 0.0, &mut rng).unwrap();
    for (a, b) in iso.weights().iter().zip(an.weights()) {
        assert!((a - b).abs() <= 1e-10);
    }
    let a0 = make_anisotropic_kernel(11, 1.2, 3.1, 0.0, 0.0, &mut rng).unwrap();
    let api = make_anisotropic_kernel(11, 1.2, 3.1, PI, 0.0, &mut rng).unwrap();
    for (a, b) in a0.weights().iter().zip(api.weights()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(make_anisotropic_kernel(11, 0.1, 1.0, 0.0, 0.0, &mut rng).is_err());
    assert!(make_anisotropic_kernel(11, 1.0, 1.0, 0.0, 0.3, &mut rng).is_err());
}

#[test]
fn gaussian8_grids() {
    let w4 = gaussian8_widths(4).unwrap();
    let expected = [1.80, 2.00, 2.20, 2.40, 2.60, 2.80, 3.00, 3.20];
    for (a, b) in w4.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let w2 = gaussian8_widths(2).unwrap();
    assert!((w2[0] - 0.80).abs() < 1e-12 && (w2[7] - 1.60).abs() < 1e-12);
    assert!(gaussian8_widths(5).is_err());
    for k in gaussian8_set(3).unwrap() {
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.size(), ISOTROPIC_SIZE);
    }
}

#[test]
fn blur_matches_double_loop_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(5, 5, 1);
    let raw: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
    let k = BlurKernel::from_weights(3, raw, KernelKind::Anisotropic, 1.0, 1.0, 0.0, 0.0).unwrap();
    let ours = blur(&img, &k);
    let reference = oracles::blur_reference(&img, k.weights(), 3);
    for (a, b) in ours.data().iter().zip(reference.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn direct_downsample_cases() {
    let img = Image::from_fn(4, 4, ColorSpace::Y, |y, x, _| (y * 4 + x) as f64).unwrap();
    assert_eq!(direct_downsample(&img, 2).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
    assert_eq!(direct_downsample(&img, 1).unwrap(), img);
    assert!(direct_downsample(&img, 0).is_err());
}

#[test]
fn delta_kernel_with_bicubic_is_plain_resize() {
    let img = random_image(18, 14, 4);
    let spec = DegradationSpec {
        scale: 2,
        kernel: BlurKernel::delta(21).unwrap(),
        downsampler: Downsampler::Bicubic,
    };
    assert_eq!(degrade(&img, &spec).unwrap(), bicubic_resize(&img, 9, 7).unwrap());
}

#[test]
fn seeded_anisotropic_degradation_is_deterministic() {
    let img = random_image(24, 24, 2);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = sample_training_spec(2, KernelKind::Anisotropic, &mut rng).unwrap();
        degrade(&img, &spec).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_spec_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for _ in 0..10_000 {
        let s = sample_training_spec(2, KernelKind::Isotropic, &mut rng).unwrap();
        lo = lo.min(s.kernel.sigma_x());
        hi = hi.max(s.kernel.sigma_x());
    }
    assert!(lo >= 0.2 && hi <= 2.0 && lo < 0.3 && hi > 1.9);
    let (mut neg, mut pos) = (false, false);
    for _ in 0..2_000 {
        let s = sample_training_spec(3, KernelKind::Anisotropic, &mut rng).unwrap();
        neg |= s.kernel.theta() < 0.0;
        pos |= s.kernel.theta() > 0.0;
    }
    assert!(neg && pos);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constructed_kernels_are_normalized(sigma in 0.05f64..8.0, sx in 0.6f64..5.0, sy in 0.6f64..5.0, theta in -PI..PI, noise in 0.0f64..0.25, seed in any::<u64>()) {
        check_kernel(&make_isotropic_kernel(21, sigma).unwrap())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_kernel(&make_anisotropic_kernel(11, sx, sy, theta, noise, &mut rng).unwrap())?;
    }

    #[test]
    fn blur_is_linear(h in 1usize..12, w in 1usize..12, a in -2.0f64..2.0, b in -2.0f64..2.0, sigma in 0.3f64..3.0, seed in any::<u64>()) {
        let x = random_image(h, w, seed);
        let y = random_image(h, w, seed ^ 1);
        let k = make_isotropic_kernel(7, sigma).unwrap();
        let lhs = blur(&x.zip_map(&y, |p, q| a * p + b * q).unwrap(), &k);
        let bx = blur(&x, &k);
        let by = blur(&y, &k);
        for ((l, p), q) in lhs.data().iter().zip(bx.data()).zip(by.data()) {
            prop_assert!((l - (a * p + b * q)).abs() <= 1e-6);
        }
    }

    #[test]
    fn blur_agrees_with_double_loop(h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![3usize, 5, 7]), seed in any::<u64>()) {
        let img = random_image(h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let raw: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let kern = BlurKernel::from_weights(k, raw, KernelKind::Anisotropic, 1.0, 1.0, 0.0, 0.0).unwrap();
        let ours = blur(&img, &kern);
        let reference = oracles::blur_reference(&img, kern.weights(), k);
        for (a, b) in ours.data().iter().zip(reference.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn degrade_dimensions(h in 4usize..40, w in 4usize..40, s in 2usize..=4, direct in any::<bool>()) {
        let img = random_image(h, w, (h * 100 + w) as u64);
        let spec = DegradationSpec {
            scale: s,
            kernel: make_isotropic_kernel(ISOTROPIC_SIZE, 1.0).unwrap(),
            downsampler: if direct { Downsampler::Direct } else { Downsampler::Bicubic },
        };
        let lr = degrade(&img, &spec).unwrap();
        prop_assert_eq!((lr.height(), lr.width()), ((h / s * s) / s, (w / s * s) / s));
    }

    #[test]
    fn narrow_blur_approaches_plain_resize(seed in any::<u64>()) {
        let img = random_image(32, 32, seed);
        let spec = DegradationSpec {
            scale: 2,
            kernel: make_isotropic_kernel(ISOTROPIC_SIZE, 0.2).unwrap(),
            downsampler: Downsampler::Bicubic,
        };
        let lr = degrade(&img, &spec).unwrap();
        let plain = bicubic_resize(&img, 16, 16).unwrap();
        let max = lr.data().iter().zip(plain.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(max <= 2e-2, "max diff {}", max);
    }

    #[test]
    fn kernel_text_round_trips(sx in 0.6f64..5.0, sy in 0.6f64..5.0, theta in -PI..PI, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = make_anisotropic_kernel(11, sx, sy, theta, 0.25, &mut rng).unwrap();
        let back = BlurKernel::from_text(&k.to_text()).unwrap();
        for (a, b) in k.weights().iter().zip(back.weights()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(back.kind(), KernelKind::Anisotropic);
    }
}
