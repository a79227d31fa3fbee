#![allow(dead_code)]

pub mod oracles;

use dssr::imaging::{ColorSpace, Image};
use dssr::model::{Dssr, DssrConfig};
use dssr::tensor::Tensor;
use dssr::variants::{build_variant, VariantKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, ColorSpace::Rgb, |_, _, _| r.random::<f64>()).unwrap()
}

/// Uniform `[0, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn model(config: &DssrConfig, variant: VariantKind, seed: u64) -> Dssr<f64> {
    build_variant(variant, config, &mut rng(seed)).unwrap()
}

pub fn tiny(scale: usize) -> DssrConfig {
    DssrConfig::tiny(scale)
}

/// Sets every entry of the named tensor to `v`.
pub fn fill_param(m: &mut Dssr<f64>, name: &str, v: f64) {
    m.params_mut()
        .get_mut(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data_mut()
        .fill(v);
}
