//! Y-channel PSNR/SSIM, per-step metric curves and test-set synthesis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{
    degrade, gaussian8_set, sample_training_spec, BlurKernel, DegradationSpec, Downsampler, KernelKind,
};
use crate::error::{contract, shape_check, Error, Result};
use crate::imaging::{bicubic_resize, luma, ColorSpace, Image};
use crate::model::Dssr;
use crate::tensor::Tensor;
use crate::training::read_image_dir;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Clamped luma plane with `shave` border pixels removed, row-major.
fn y_plane(img: &Image, shave: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = (img.height(), img.width());
    contract!(
        2 * shave < h && 2 * shave < w,
        "shave {shave} leaves nothing of a {h}x{w} image"
    );
    let (oh, ow) = (h - 2 * shave, w - 2 * shave);
    let mut out = Vec::with_capacity(oh * ow);
    for y in shave..h - shave {
        for x in shave..w - shave {
            let v = match img.colorspace() {
                ColorSpace::Rgb => luma(
                    img.get(y, x, 0).clamp(0.0, 1.0),
                    img.get(y, x, 1).clamp(0.0, 1.0),
                    img.get(y, x, 2).clamp(0.0, 1.0),
                ),
                ColorSpace::Y => img.get(y, x, 0).clamp(0.0, 1.0),
            };
            out.push(v);
        }
    }
    Ok((oh, ow, out))
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    shape_check!(
        a.same_dims(b),
        "cannot compare {}x{}x{} with {}x{}x{}",
        a.height(),
        a.width(),
        a.channels(),
        b.height(),
        b.width(),
        b.channels()
    );
    Ok(())
}

/// PSNR in dB on the luma channel with peak 1; `+inf` for identical inputs.
pub fn psnr_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (_, _, ya) = y_plane(a, shave)?;
    let (_, _, yb) = y_plane(b, shave)?;
    let mse = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / ya.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with window `g`.
fn filter_valid(h: usize, w: usize, src: &[f64], g: &[f64]) -> (usize, usize, Vec<f64>) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (oh, ow, out)
}

/// Single-scale SSIM on the luma channel: Gaussian window, mean over
/// valid window positions.
pub fn ssim_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, ya) = y_plane(a, shave)?;
    let (_, _, yb) = y_plane(b, shave)?;
    contract!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after shaving, got {h}x{w}"
    );
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (_, _, mu_a) = filter_valid(h, w, &ya, &g);
    let (_, _, mu_b) = filter_valid(h, w, &yb, &g);
    let (_, _, e_aa) = filter_valid(h, w, &prod(&ya, &ya), &g);
    let (_, _, e_bb) = filter_valid(h, w, &prod(&yb, &yb), &g);
    let (_, _, e_ab) = filter_valid(h, w, &prod(&ya, &yb), &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

fn mean_abs(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.data().len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Every image under each of the 8 isotropic test kernels.
    Gaussian8,
    /// One seeded random anisotropic kernel per image.
    Anisotropic,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Gaussian8 => "gaussian8",
            Protocol::Anisotropic => "anisotropic",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian8" => Ok(Protocol::Gaussian8),
            "anisotropic" => Ok(Protocol::Anisotropic),
            _ => Err(Error::Contract(format!("unknown protocol `{s}` (expected gaussian8 or anisotropic)"))),
        }
    }
}

/// An LR/HR test pair and the kernel that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPair {
    pub name: String,
    pub lr: Image,
    pub hr: Image,
    pub kernel: BlurKernel,
}

/// Degrades `images` (RGB, cropped to the scale) with bicubic downsampling.
pub fn build_testset_from_images(
    images: &[(String, Image)],
    scale: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<Vec<TestPair>> {
    contract!(!images.is_empty(), "test set needs at least one image");
    let mut pairs = Vec::new();
    match protocol {
        Protocol::Gaussian8 => {
            let kernels = gaussian8_set(scale)?;
            for (name, img) in images {
                let hr = img.to_rgb().crop_to_multiple(scale)?;
                for (k, kernel) in kernels.iter().enumerate() {
                    pairs.push(make_pair(format!("{name}_k{k}"), &hr, kernel.clone(), scale)?);
                }
            }
        }
        Protocol::Anisotropic => {
            for (i, (name, img)) in images.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let kernel = sample_training_spec(scale, KernelKind::Anisotropic, &mut rng)?.kernel;
                let hr = img.to_rgb().crop_to_multiple(scale)?;
                pairs.push(make_pair(name.clone(), &hr, kernel, scale)?);
            }
        }
    }
    Ok(pairs)
}

fn make_pair(name: String, hr: &Image, kernel: BlurKernel, scale: usize) -> Result<TestPair> {
    let spec = DegradationSpec {
        scale,
        kernel,
        downsampler: Downsampler::Bicubic,
    };
    let lr = degrade(hr, &spec)?;
    Ok(TestPair {
        name,
        lr,
        hr: hr.clone(),
        kernel: spec.kernel,
    })
}

pub fn build_testset(hr_dir: impl AsRef<Path>, scale: usize, protocol: Protocol, seed: u64) -> Result<Vec<TestPair>> {
    build_testset_from_images(&read_image_dir(hr_dir)?, scale, protocol, seed)
}

/// Per-step outputs of the model on one pair, as images.
pub struct PairOutputs {
    pub ihat: Image,
    pub sr: Vec<Image>,
    pub detail: Vec<Image>,
}

pub fn run_pair(model: &Dssr<f32>, lr: &Image, steps: usize) -> Result<PairOutputs> {
    let lr = lr.to_rgb();
    let s = model.config().scale;
    let ihat = bicubic_resize(&lr, lr.height() * s, lr.width() * s)?;
    let outs = model.unroll(&lr.to_tensor::<f32>(), steps)?;
    let to_img = |t: &Tensor<f32>| Image::from_tensor(t, 0);
    Ok(PairOutputs {
        ihat,
        sr: outs.iter().map(|o| to_img(&o.sr)).collect::<Result<_>>()?,
        detail: outs.iter().map(|o| to_img(&o.detail_hr)).collect::<Result<_>>()?,
    })
}

/// Mean over pairs of `L1(hr - ihat, detail_t)` for each step.
pub fn detail_l1_curve(model: &Dssr<f32>, pairs: &[TestPair], steps: usize) -> Result<Vec<f64>> {
    contract!(!pairs.is_empty(), "detail curve needs at least one pair");
    let mut curve = vec![0.0; steps];
    for p in pairs {
        let out = run_pair(model, &p.lr, steps)?;
        let label = p.hr.to_rgb().zip_map(&out.ihat, |a, b| a - b)?;
        for (c, d) in curve.iter_mut().zip(&out.detail) {
            *c += mean_abs(&label, d)?;
        }
    }
    Ok(curve.into_iter().map(|c| c / pairs.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub kernel: String,
    pub sigma: f64,
    pub bicubic_psnr_y: f64,
    pub bicubic_ssim_y: f64,
    /// One entry per step.
    pub psnr_y: Vec<f64>,
    pub ssim_y: Vec<f64>,
    pub detail_l1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub steps: usize,
    pub mean_psnr_y: Vec<f64>,
    pub mean_ssim_y: Vec<f64>,
    pub mean_detail_l1: Vec<f64>,
    pub final_psnr_y: f64,
    pub final_ssim_y: f64,
    pub bicubic_psnr_y: f64,
    pub bicubic_ssim_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scale: usize,
    pub shave: usize,
    pub records: Vec<ImageRecord>,
    pub aggregate: Aggregate,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Scores the model's first `steps` unrolled outputs on every pair, with
/// the bicubic upsampling as a baseline. The border shave equals the scale.
pub fn evaluate(model: &Dssr<f32>, pairs: &[TestPair], steps: usize) -> Result<MetricsReport> {
    contract!(steps >= 1, "evaluation needs at least one step");
    contract!(!pairs.is_empty(), "evaluation needs at least one pair");
    let scale = model.config().scale;
    let shave = scale;
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let hr = p.hr.to_rgb();
        let out = run_pair(model, &p.lr, steps)?;
        check_pair(&hr, &out.ihat)?;
        let label = hr.zip_map(&out.ihat, |a, b| a - b)?;
        records.push(ImageRecord {
            name: p.name.clone(),
            kernel: p.kernel.descriptor(),
            sigma: p.kernel.sigma_x(),
            bicubic_psnr_y: psnr_y(&out.ihat, &hr, shave)?,
            bicubic_ssim_y: ssim_y(&out.ihat, &hr, shave)?,
            psnr_y: out.sr.iter().map(|sr| psnr_y(sr, &hr, shave)).collect::<Result<_>>()?,
            ssim_y: out.sr.iter().map(|sr| ssim_y(sr, &hr, shave)).collect::<Result<_>>()?,
            detail_l1: out.detail.iter().map(|d| mean_abs(&label, d)).collect::<Result<_>>()?,
        });
    }
    let per_step = |f: fn(&ImageRecord) -> &Vec<f64>| -> Vec<f64> {
        (0..steps).map(|t| mean(records.iter().map(|r| f(r)[t]))).collect()
    };
    let mean_psnr_y = per_step(|r| &r.psnr_y);
    let mean_ssim_y = per_step(|r| &r.ssim_y);
    let aggregate = Aggregate {
        images: records.len(),
        steps,
        final_psnr_y: mean_psnr_y[steps - 1],
        final_ssim_y: mean_ssim_y[steps - 1],
        mean_detail_l1: per_step(|r| &r.detail_l1),
        mean_psnr_y,
        mean_ssim_y,
        bicubic_psnr_y: mean(records.iter().map(|r| r.bicubic_psnr_y)),
        bicubic_ssim_y: mean(records.iter().map(|r| r.bicubic_ssim_y)),
    };
    Ok(MetricsReport {
        scale,
        shave,
        records,
        aggregate,
    })
}

impl MetricsReport {
    /// One row per image and kernel.
    pub fn to_csv(&self) -> String {
        let steps = self.aggregate.steps;
        let mut s = String::from("name,kernel,sigma,bicubic_psnr_y,bicubic_ssim_y");
        for metric in ["psnr_y", "ssim_y", "detail_l1"] {
            for t in 1..=steps {
                let _ = write!(s, ",{metric}_t{t}");
            }
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{},{:.6},{:.6}",
                r.name, r.kernel, r.sigma, r.bicubic_psnr_y, r.bicubic_ssim_y
            );
            for v in r.psnr_y.iter().chain(&r.ssim_y).chain(&r.detail_l1) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn aggregate_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&serde_json::json!({
            "scale": self.scale,
            "shave": self.shave,
            "aggregate": self.aggregate,
        }))
        .map_err(|e| Error::Parse(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.aggregate_json()?).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(h, w, ColorSpace::Y, |y, x, _| f(y, x)).unwrap()
    }

    #[test]
    fn psnr_of_one_level_offset() {
        let a = gray(16, 16, |y, x| ((y * 16 + x) % 200) as f64 / 255.0);
        let b = a.map(|v| v + 1.0 / 255.0);
        let p = psnr_y(&a, &b, 0).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9, "{p}");
        assert_eq!(psnr_y(&a, &a, 2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let a = gray(24, 24, |y, x| ((y / 3 + x / 2) % 2) as f64);
        let inv = a.map(|v| 1.0 - v);
        assert_eq!(ssim_y(&a, &a, 0).unwrap(), 1.0);
        assert!(ssim_y(&a, &inv, 0).unwrap() < 0.1);
    }

    #[test]
    fn window_sums_to_one() {
        assert!((gaussian_window().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
