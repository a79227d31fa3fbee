//! Blur kernels and the blur-then-downsample degradation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::imaging::{bicubic_resize, Image};

/// Kernel side used for isotropic training and test kernels.
pub const ISOTROPIC_SIZE: usize = 21;
/// Kernel side used for anisotropic kernels.
pub const ANISOTROPIC_SIZE: usize = 11;
pub const ANISOTROPIC_SIGMA_RANGE: (f64, f64) = (0.6, 5.0);
pub const ANISOTROPIC_NOISE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Isotropic,
    Anisotropic,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Isotropic => "isotropic",
            KernelKind::Anisotropic => "anisotropic",
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" | "iso" => Ok(KernelKind::Isotropic),
            "anisotropic" | "aniso" => Ok(KernelKind::Anisotropic),
            other => Err(Error::Parse(format!("unknown kernel kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsampler {
    /// Keep the top-left pixel of every `s×s` cell.
    Direct,
    Bicubic,
}

impl FromStr for Downsampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Downsampler::Direct),
            "bicubic" => Ok(Downsampler::Bicubic),
            other => Err(Error::Parse(format!("unknown downsampler `{other}`"))),
        }
    }
}

/// Square, non-negative blur kernel summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    kind: KernelKind,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    noise_frac: f64,
}

impl BlurKernel {
    /// Validates and normalizes raw weights.
    pub fn from_weights(
        size: usize,
        mut weights: Vec<f64>,
        kind: KernelKind,
        sigma_x: f64,
        sigma_y: f64,
        theta: f64,
        noise_frac: f64,
    ) -> Result<Self> {
        contract!(size >= 1 && size % 2 == 1, "kernel size must be odd, got {size}");
        contract!(weights.len() == size * size, "{} weights for a {size}x{size} kernel", weights.len());
        contract!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "kernel weights must be finite and non-negative"
        );
        contract!((0.0..=ANISOTROPIC_NOISE).contains(&noise_frac), "noise fraction {noise_frac} outside [0, 0.25]");
        let total: f64 = weights.iter().sum();
        contract!(total > 0.0, "kernel weights sum to zero");
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(BlurKernel {
            size,
            weights,
            kind,
            sigma_x,
            sigma_y,
            theta,
            noise_frac,
        })
    }

    /// Identity kernel: a single one at the center.
    pub fn delta(size: usize) -> Result<Self> {
        contract!(size % 2 == 1, "kernel size must be odd, got {size}");
        let mut w = vec![0.0; size * size];
        w[size * size / 2] = 1.0;
        BlurKernel::from_weights(size, w, KernelKind::Isotropic, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn noise_frac(&self) -> f64 {
        self.noise_frac
    }

    /// Short human-readable tag used in reports and file names.
    pub fn descriptor(&self) -> String {
        match self.kind {
            KernelKind::Isotropic => format!("iso_s{:.2}", self.sigma_x),
            KernelKind::Anisotropic => format!(
                "aniso_sx{:.2}_sy{:.2}_t{:.2}_n{:.2}",
                self.sigma_x, self.sigma_y, self.theta, self.noise_frac
            ),
        }
    }

    /// Plain-text form: a header line `size kind sigma_x sigma_y theta
    /// noise_frac` followed by `size` rows of weights.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {}\n",
            self.size,
            self.kind.as_str(),
            self.sigma_x,
            self.sigma_y,
            self.theta,
            self.noise_frac
        );
        for row in self.weights.chunks_exact(self.size) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty kernel file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!("kernel header needs 6 fields, got `{header}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")));
        let size: usize = fields[0]
            .parse()
            .map_err(|e| Error::Parse(format!("bad kernel size `{}`: {e}", fields[0])))?;
        let kind: KernelKind = fields[1].parse()?;
        let (sx, sy, theta, noise) = (num(fields[2])?, num(fields[3])?, num(fields[4])?, num(fields[5])?);
        let mut weights = Vec::with_capacity(size * size);
        for (r, line) in lines.enumerate() {
            let row: Vec<f64> = line.split_whitespace().map(num).collect::<Result<_>>()?;
            if row.len() != size {
                return Err(Error::Parse(format!("kernel row {r} has {} entries, want {size}", row.len())));
            }
            weights.extend(row);
        }
        BlurKernel::from_weights(size, weights, kind, sx, sy, theta, noise)
    }
}

/// Degradation applied to an HR image to synthesize its LR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub kernel: BlurKernel,
    pub downsampler: Downsampler,
}

pub fn check_scale(scale: usize) -> Result<()> {
    contract!(matches!(scale, 2..=4), "scale must be 2, 3 or 4, got {scale}");
    Ok(())
}

pub fn make_isotropic_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    contract!(size >= 3 && size % 2 == 1, "kernel size must be odd and >= 3, got {size}");
    contract!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive, got {sigma}");
    let c = (size - 1) as f64 / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    BlurKernel::from_weights(size, w, KernelKind::Isotropic, sigma, sigma, 0.0, 0.0)
}

/// Rotated bivariate Gaussian with optional multiplicative noise.
///
/// The covariance is `R(theta) diag(sx², sy²) R(theta)ᵀ`; each cell is then
/// scaled by an independent factor drawn from `U[1 - noise, 1 + noise]`.
pub fn make_anisotropic_kernel<R: Rng + ?Sized>(
    size: usize,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    noise_frac: f64,
    rng: &mut R,
) -> Result<BlurKernel> {
    contract!(size >= 3 && size % 2 == 1, "kernel size must be odd and >= 3, got {size}");
    let (lo, hi) = ANISOTROPIC_SIGMA_RANGE;
    contract!(
        (lo..=hi).contains(&sigma_x) && (lo..=hi).contains(&sigma_y),
        "anisotropic sigmas ({sigma_x}, {sigma_y}) outside [{lo}, {hi}]"
    );
    contract!((0.0..=ANISOTROPIC_NOISE).contains(&noise_frac), "noise fraction {noise_frac} outside [0, 0.25]");
    let c = (size - 1) as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dx, dy) = (j as f64 - c, i as f64 - c);
            // coordinates in the kernel's principal frame
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let q = u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y);
            w.push((-0.5 * q).exp());
        }
    }
    if noise_frac > 0.0 {
        for v in &mut w {
            *v *= rng.random_range(1.0 - noise_frac..=1.0 + noise_frac);
        }
    }
    BlurKernel::from_weights(size, w, KernelKind::Anisotropic, sigma_x, sigma_y, theta, noise_frac)
}

/// Width range of the eight-kernel isotropic test protocol for a scale.
pub fn gaussian8_range(scale: usize) -> Result<(f64, f64)> {
    check_scale(scale)?;
    Ok(match scale {
        2 => (0.80, 1.60),
        3 => (1.35, 2.40),
        _ => (1.80, 3.20),
    })
}

pub fn gaussian8_widths(scale: usize) -> Result<[f64; 8]> {
    let (lo, hi) = gaussian8_range(scale)?;
    Ok(std::array::from_fn(|i| lo + (hi - lo) * i as f64 / 7.0))
}

pub fn gaussian8_set(scale: usize) -> Result<Vec<BlurKernel>> {
    gaussian8_widths(scale)?
        .iter()
        .map(|&s| make_isotropic_kernel(ISOTROPIC_SIZE, s))
        .collect()
}

/// Index reflection without edge repetition (`-1 -> 1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// 2-D correlation of every channel with `kernel`, reflect-padded.
pub fn blur(img: &Image, kernel: &BlurKernel) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let k = kernel.size();
    let r = (k / 2) as isize;
    let (ph, pw) = (h + k - 1, w + k - 1);
    let mut out = img.clone();
    let mut padded = vec![0.0; ph * pw];
    let mut acc = vec![0.0; w];
    for ch in 0..c {
        for py in 0..ph {
            let sy = reflect(py as isize - r, h);
            for px in 0..pw {
                let sx = reflect(px as isize - r, w);
                padded[py * pw + px] = img.get(sy, sx, ch);
            }
        }
        for y in 0..h {
            acc.fill(0.0);
            for i in 0..k {
                let row = &padded[(y + i) * pw..(y + i + 1) * pw];
                for j in 0..k {
                    let wgt = kernel.weight(i, j);
                    if wgt == 0.0 {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(&row[j..j + w]) {
                        *a += wgt * v;
                    }
                }
            }
            for (x, &v) in acc.iter().enumerate() {
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Keeps the top-left pixel of each `s×s` cell (after cropping to a
/// multiple of `s`).
pub fn direct_downsample(img: &Image, s: usize) -> Result<Image> {
    contract!(s >= 1, "downsampling factor must be >= 1");
    let img = img.crop_to_multiple(s)?;
    let (h, w) = (img.height() / s, img.width() / s);
    Image::from_fn(h, w, img.colorspace(), |y, x, c| img.get(y * s, x * s, c))
}

/// Blur then downsample; the HR image is first cropped to a multiple of the
/// scale.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<Image> {
    let s = spec.scale;
    contract!(s >= 1, "scale must be >= 1");
    contract!(
        hr.height() >= s && hr.width() >= s,
        "{}x{} image is smaller than scale {s}",
        hr.height(),
        hr.width()
    );
    let hr = hr.crop_to_multiple(s)?;
    let blurred = blur(&hr, &spec.kernel);
    match spec.downsampler {
        Downsampler::Direct => direct_downsample(&blurred, s),
        Downsampler::Bicubic => bicubic_resize(&blurred, hr.height() / s, hr.width() / s),
    }
}

/// Upper bound of the uniform training width distribution.
pub fn isotropic_training_max_sigma(scale: usize) -> Result<f64> {
    check_scale(scale)?;
    Ok(match scale {
        2 => 2.0,
        3 => 3.0,
        _ => 4.0,
    })
}

pub fn sample_training_spec<R: Rng + ?Sized>(scale: usize, kind: KernelKind, rng: &mut R) -> Result<DegradationSpec> {
    let kernel = match kind {
        KernelKind::Isotropic => {
            let hi = isotropic_training_max_sigma(scale)?;
            make_isotropic_kernel(ISOTROPIC_SIZE, rng.random_range(0.2..=hi))?
        }
        KernelKind::Anisotropic => {
            check_scale(scale)?;
            let (lo, hi) = ANISOTROPIC_SIGMA_RANGE;
            let sx = rng.random_range(lo..=hi);
            let sy = rng.random_range(lo..=hi);
            let theta = rng.random_range(-PI..=PI);
            make_anisotropic_kernel(ANISOTROPIC_SIZE, sx, sy, theta, ANISOTROPIC_NOISE, rng)?
        }
    };
    Ok(DegradationSpec {
        scale,
        kernel,
        downsampler: Downsampler::Bicubic,
    })
}
