mod common;

use common::oracles;
use dssr::imaging::{bicubic_resize, load_image, luma, quantize_u8, rgb_to_y, save_image, ColorSpace, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, ColorSpace::Rgb, |_, _, _| rng.random::<f64>()).unwrap()
}

#[test]
fn png_gray_128_loads_as_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    image::save_buffer(&path, &[128u8; 4], 2, 2, image::ExtendedColorType::L8).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!(img.colorspace(), ColorSpace::Y);
    assert!(img.data().iter().all(|&v| v == 128.0 / 255.0));
}

#[test]
fn byte_extremes_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.png");
    image::save_buffer(&path, &[0u8, 255, 0, 255, 0, 255], 2, 1, image::ExtendedColorType::Rgb8).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn save_quantizes_with_rounding() {
    assert_eq!(quantize_u8(1.0), 255);
    assert_eq!(quantize_u8(0.5), 128);
    assert_eq!(quantize_u8(-0.3), 0);
    assert_eq!(quantize_u8(7.0), 255);
}

#[test]
fn exact_bytes_survive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Image::from_fn(7, 5, ColorSpace::Rgb, |_, _, _| f64::from(rng.random::<u8>()) / 255.0).unwrap();
    let path = dir.path().join("r.png");
    save_image(&img, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
}

#[test]
fn unreadable_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_image(dir.path().join("missing.png")).is_err());
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(load_image(&junk).is_err());
}

#[test]
fn luma_of_white_black_and_grays() {
    assert!((luma(1.0, 1.0, 1.0) - 235.0 / 255.0).abs() < 1e-12);
    assert!((luma(0.0, 0.0, 0.0) - 16.0 / 255.0).abs() < 1e-12);
    assert!(luma(0.6, 0.6, 0.6) > luma(0.4, 0.4, 0.4));
    let y = Image::filled(1, 1, ColorSpace::Y, 0.5).unwrap();
    assert!(rgb_to_y(&y).is_err());
}

#[test]
fn ramp_downscale_matches_reference() {
    let ramp = Image::from_fn(8, 8, ColorSpace::Y, |y, x, _| (y * 8 + x) as f64 / 63.0).unwrap();
    let ours = bicubic_resize(&ramp, 4, 4).unwrap();
    let reference = oracles::bicubic_reference(&ramp, 4, 4);
    let diff = oracles::mean_abs_diff(ours.data(), reference.data());
    let max = ours.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max <= 1e-4, "max diff {max} (mean {diff})");
}

#[test]
fn upscale_matches_reference() {
    let img = random_image(9, 6, 11);
    let ours = bicubic_resize(&img, 18, 13).unwrap();
    let reference = oracles::bicubic_reference(&img, 18, 13);
    let max = ours.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max <= 1e-10, "max diff {max}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resize_agrees_with_reference(h in 2usize..20, w in 2usize..20, oh in 1usize..24, ow in 1usize..24, seed in any::<u64>()) {
        let img = random_image(h, w, seed);
        let ours = bicubic_resize(&img, oh, ow).unwrap();
        let reference = oracles::bicubic_reference(&img, oh, ow);
        for (a, b) in ours.data().iter().zip(reference.data()) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..16, w in 1usize..16, oh in 1usize..20, ow in 1usize..20, c in 0.0f64..1.0) {
        let img = Image::filled(h, w, ColorSpace::Rgb, c).unwrap();
        let out = bicubic_resize(&img, oh, ow).unwrap();
        prop_assert_eq!((out.height(), out.width()), (oh, ow));
        prop_assert!(out.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn image_invariants_hold(h in 0usize..4, w in 0usize..4, extra in 0usize..2) {
        let n = h * w * 3 + extra;
        let built = Image::new(h, w, ColorSpace::Rgb, vec![0.0; n]);
        prop_assert_eq!(built.is_ok(), h >= 1 && w >= 1 && extra == 0);
    }
}
