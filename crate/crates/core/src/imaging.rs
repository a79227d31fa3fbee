//! Images as float rasters, luma conversion and the bicubic resampler.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{contract, Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Rgb,
    Y,
}

/// `H×W×C` raster stored row-major with interleaved channels.
///
/// Values are nominally in `[0, 1]` but are never clamped here; clamping
/// happens when saving and when scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    colorspace: ColorSpace,
    bitdepth_hint: u8,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, colorspace: ColorSpace, data: Vec<f64>) -> Result<Self> {
        let channels = match colorspace {
            ColorSpace::Rgb => 3,
            ColorSpace::Y => 1,
        };
        contract!(height >= 1 && width >= 1, "image must be at least 1x1, got {height}x{width}");
        contract!(
            data.len() == height * width * channels,
            "{} values do not fill a {height}x{width}x{channels} image",
            data.len()
        );
        Ok(Image {
            height,
            width,
            channels,
            colorspace,
            bitdepth_hint: 8,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, colorspace: ColorSpace, value: f64) -> Result<Self> {
        let c = if colorspace == ColorSpace::Rgb { 3 } else { 1 };
        Image::new(height, width, colorspace, vec![value; height * width * c])
    }

    /// Builds an image from a closure `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        colorspace: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let c = if colorspace == ColorSpace::Rgb { 3 } else { 1 };
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Image::new(height, width, colorspace, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn bitdepth_hint(&self) -> u8 {
        self.bitdepth_hint
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        contract!(
            height >= 1 && width >= 1 && top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}@({top},{left}) outside {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Image::new(height, width, self.colorspace, data)
    }

    /// Crops bottom/right so both dimensions are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Image> {
        contract!(s >= 1, "crop multiple must be >= 1");
        let h = self.height / s * s;
        let w = self.width / s * s;
        contract!(h >= 1 && w >= 1, "{}x{} image is smaller than factor {s}", self.height, self.width);
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        self.crop(0, 0, h, w)
    }

    /// Replicates a Y image into three channels; RGB images are returned as is.
    pub fn to_rgb(&self) -> Image {
        match self.colorspace {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Y => Image {
                channels: 3,
                colorspace: ColorSpace::Rgb,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
                ..self.clone()
            },
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Rotates 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                // (y, x) -> (w-1-x, y)
                let (ny, nx) = (w - 1 - x, y);
                for c in 0..self.channels {
                    data[(ny * h + nx) * self.channels + c] = self.get(y, x, c);
                }
            }
        }
        Image {
            height: w,
            width: h,
            data,
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        contract!(
            self.same_dims(other),
            "dims {}x{}x{} vs {}x{}x{}",
            self.height,
            self.width,
            self.channels,
            other.height,
            other.width,
            other.channels
        );
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        })
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![F::zero(); h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] = F::of(self.data[i * c + ch]);
            }
        }
        Tensor::from_vec(&[1, c, h, w], data).expect("consistent dims")
    }

    /// Inverse of [`Image::to_tensor`] for batch entry `index`.
    pub fn from_tensor<F: Float>(t: &Tensor<F>, index: usize) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        contract!(index < n, "batch index {index} >= {n}");
        let colorspace = match c {
            3 => ColorSpace::Rgb,
            1 => ColorSpace::Y,
            _ => return Err(Error::Format(format!("{c}-channel tensor is not an image"))),
        };
        let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = plane[ch * h * w + i].to_f64();
            }
        }
        Image::new(h, w, colorspace, data)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let scale = |v: u8| f64::from(v) / 255.0;
    match decoded {
        DynamicImage::ImageLuma8(buf) => Image::new(h, w, ColorSpace::Y, buf.into_raw().into_iter().map(scale).collect()),
        DynamicImage::ImageRgb8(buf) => Image::new(h, w, ColorSpace::Rgb, buf.into_raw().into_iter().map(scale).collect()),
        other => Err(Error::Format(format!(
            "{}: only 8-bit 1- or 3-channel images are supported, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    contract!(img.data.iter().all(|v| v.is_finite()), "cannot save non-finite image to {}", path.display());
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let color = match img.colorspace {
        ColorSpace::Rgb => image::ExtendedColorType::Rgb8,
        ColorSpace::Y => image::ExtendedColorType::L8,
    };
    image::save_buffer_with_format(path, &bytes, img.width as u32, img.height as u32, color, ImageFormat::Png).map_err(
        |e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        },
    )
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// BT.601 studio-swing luma weights on the 0..255 scale.
const LUMA_OFFSET: f64 = 16.0;
const LUMA_WEIGHTS: [f64; 3] = [65.481, 128.553, 24.966];

#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    (LUMA_OFFSET + LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b) / 255.0
}

pub fn rgb_to_y(img: &Image) -> Result<Image> {
    contract!(img.colorspace == ColorSpace::Rgb, "rgb_to_y needs an RGB image");
    let data = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    Image::new(img.height, img.width, ColorSpace::Y, data)
}

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    let x2 = x * x;
    let x3 = x2 * x;
    if x <= 1.0 {
        (A + 2.0) * x3 - (A + 3.0) * x2 + 1.0
    } else if x < 2.0 {
        A * x3 - 5.0 * A * x2 + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

#[inline]
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Per-output-sample taps of a 1-D bicubic resampler.
///
/// When shrinking, the kernel is stretched by the inverse scale so it also
/// acts as a low-pass prefilter. Out-of-range taps are mirrored
/// (symmetric boundary) and every tap set is normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeKernel {
    in_len: usize,
    out_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl ResizeKernel {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        assert!(in_len >= 1 && out_len >= 1, "resize lengths must be positive");
        let scale = out_len as f64 / in_len as f64;
        let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
        let taps = (0..out_len)
            .map(|o| {
                let center = (o as f64 + 0.5) / scale - 0.5;
                let first = (center - width / 2.0).floor() as isize;
                let last = (center + width / 2.0).ceil() as isize;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                for j in first..=last {
                    let wgt = kscale * keys_cubic(kscale * (center - j as f64));
                    if wgt != 0.0 {
                        let idx = mirror(j, in_len);
                        match taps.iter_mut().find(|(i, _)| *i == idx) {
                            Some(t) => t.1 += wgt,
                            None => taps.push((idx, wgt)),
                        }
                    }
                }
                let total: f64 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        ResizeKernel { in_len, out_len, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn taps(&self, o: usize) -> &[(usize, f64)] {
        &self.taps[o]
    }

    /// Resamples a strided 1-D signal: `dst[o*ds] = Σ w · src[i*ss]`.
    #[inline]
    pub(crate) fn apply<F: Float>(&self, src: &[F], ss: usize, dst: &mut [F], ds: usize) {
        for (o, taps) in self.taps.iter().enumerate() {
            let mut acc = F::zero();
            for &(i, w) in taps {
                acc += F::of(w) * src[i * ss];
            }
            dst[o * ds] = acc;
        }
    }

    /// Adjoint of [`ResizeKernel::apply`], accumulating into `src_grad`.
    #[inline]
    pub(crate) fn apply_adjoint<F: Float>(&self, dst_grad: &[F], ds: usize, src_grad: &mut [F], ss: usize) {
        for (o, taps) in self.taps.iter().enumerate() {
            let g = dst_grad[o * ds];
            for &(i, w) in taps {
                src_grad[i * ss] += F::of(w) * g;
            }
        }
    }
}

/// Separable resize of one `h×w` plane with precomputed kernels.
pub(crate) fn resize_plane<F: Float>(src: &[F], h: usize, w: usize, rows: &ResizeKernel, cols: &ResizeKernel, dst: &mut [F]) {
    let (oh, ow) = (rows.out_len, cols.out_len);
    debug_assert_eq!((rows.in_len, cols.in_len), (h, w));
    let mut tmp = vec![F::zero(); h * ow];
    for y in 0..h {
        cols.apply(&src[y * w..(y + 1) * w], 1, &mut tmp[y * ow..(y + 1) * ow], 1);
    }
    for x in 0..ow {
        rows.apply(&tmp[x..], ow, &mut dst[x..], ow);
    }
    debug_assert_eq!(dst.len(), oh * ow);
}

/// Adjoint of [`resize_plane`], accumulating into `src_grad`.
pub(crate) fn resize_plane_adjoint<F: Float>(
    dst_grad: &[F],
    rows: &ResizeKernel,
    cols: &ResizeKernel,
    src_grad: &mut [F],
) {
    let (h, w) = (rows.in_len, cols.in_len);
    let ow = cols.out_len;
    let mut tmp = vec![F::zero(); h * ow];
    for x in 0..ow {
        rows.apply_adjoint(&dst_grad[x..], ow, &mut tmp[x..], ow);
    }
    for y in 0..h {
        cols.apply_adjoint(&tmp[y * ow..(y + 1) * ow], 1, &mut src_grad[y * w..(y + 1) * w], 1);
    }
}

/// Bicubic resize (Keys, `a = -0.5`, anti-aliased when shrinking).
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    contract!(out_h >= 1 && out_w >= 1, "output size must be positive, got {out_h}x{out_w}");
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = ResizeKernel::new(img.height, out_h);
    let cols = ResizeKernel::new(img.width, out_w);
    let c = img.channels;
    let mut data = vec![0.0; out_h * out_w * c];
    let mut plane = vec![0.0; img.height * img.width];
    let mut out_plane = vec![0.0; out_h * out_w];
    for ch in 0..c {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = img.data[i * c + ch];
        }
        resize_plane(&plane, img.height, img.width, &rows, &cols, &mut out_plane);
        for (i, &v) in out_plane.iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    Image::new(out_h, out_w, img.colorspace, data)
}

/// Bicubic resize of every plane of an NCHW tensor.
pub fn resize_tensor<F: Float>(t: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = t.dims4()?;
    contract!(out_h >= 1 && out_w >= 1, "output size must be positive, got {out_h}x{out_w}");
    let rows = ResizeKernel::new(h, out_h);
    let cols = ResizeKernel::new(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for (src, dst) in t.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(out_h * out_w)) {
        resize_plane(src, h, w, &rows, &cols, dst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, ColorSpace::Rgb, |y, x, c| (y * w + x) as f64 / (h * w) as f64 + 0.1 * c as f64).unwrap()
    }

    #[test]
    fn image_invariants_are_enforced() {
        assert!(Image::new(0, 3, ColorSpace::Rgb, vec![]).is_err());
        assert!(Image::new(2, 2, ColorSpace::Rgb, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, ColorSpace::Y, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn luma_endpoints() {
        let white = Image::filled(1, 1, ColorSpace::Rgb, 1.0).unwrap();
        let black = Image::filled(1, 1, ColorSpace::Rgb, 0.0).unwrap();
        assert_abs_diff_eq!(rgb_to_y(&white).unwrap().data()[0], 235.0 / 255.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rgb_to_y(&black).unwrap().data()[0], 16.0 / 255.0, epsilon = 1e-12);
        let g1 = Image::filled(1, 1, ColorSpace::Rgb, 0.6).unwrap();
        let g0 = Image::filled(1, 1, ColorSpace::Rgb, 0.4).unwrap();
        assert!(rgb_to_y(&g1).unwrap().data()[0] > rgb_to_y(&g0).unwrap().data()[0]);
        assert!(rgb_to_y(&rgb_to_y(&g1).unwrap()).is_err());
    }

    #[test]
    fn resize_identity_and_constants() {
        let img = ramp(7, 9);
        assert_eq!(bicubic_resize(&img, 7, 9).unwrap(), img);
        let c = Image::filled(10, 6, ColorSpace::Rgb, 0.37).unwrap();
        for (oh, ow) in [(5, 3), (20, 12), (7, 13), (1, 1), (3, 17)] {
            let r = bicubic_resize(&c, oh, ow).unwrap();
            assert_eq!((r.height(), r.width(), r.channels()), (oh, ow, 3));
            for &v in r.data() {
                assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn keys_kernel_vanishes_at_integers() {
        assert_eq!(keys_cubic(0.0), 1.0);
        assert_eq!(keys_cubic(1.0), 0.0);
        assert_eq!(keys_cubic(2.0), 0.0);
        assert_eq!(keys_cubic(-1.0), 0.0);
    }

    #[test]
    fn resize_adjoint_matches_forward() {
        let rows = ResizeKernel::new(9, 4);
        let cols = ResizeKernel::new(7, 14);
        let x: Vec<f64> = (0..63).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..56).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut y = vec![0.0; 56];
        resize_plane(&x, 9, 7, &rows, &cols, &mut y);
        let mut gx = vec![0.0; 63];
        resize_plane_adjoint(&g, &rows, &cols, &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn flips_and_rotations() {
        let img = ramp(3, 5);
        let r = img.rot90();
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.rot90().rot90().rot90(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 0, 1), img.get(0, 4, 1));
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(4, 6);
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 6]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn crop_to_multiple_drops_bottom_right() {
        let img = ramp(7, 10);
        let c = img.crop_to_multiple(3).unwrap();
        assert_eq!((c.height(), c.width()), (6, 9));
        assert_eq!(c.get(5, 8, 2), img.get(5, 8, 2));
    }
}
