//! Dense row-major tensors and the small set of kernels the network needs.
//!
//! Feature maps are laid out NCHW. Convolutions lower to `im2col` + GEMM,
//! with the GEMM delegated to `matrixmultiply` (single threaded, so results
//! are bit-reproducible for a given build).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{shape_check, Result};

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const NAME: &'static str;

    /// `c = a·b + beta·c` for row-major operands. `ta`/`tb` select the
    /// transpose of the stored matrix: with `ta`, `a` holds a `k×m` matrix.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_float {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Float for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                // SAFETY: the asserts above bound every index reachable from
                // the (rows, cols, strides) triples passed below.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, "f32", matrixmultiply::sgemm);
impl_float!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let want: usize = shape.iter().product();
        shape_check!(
            data.len() == want,
            "{} values cannot fill shape {:?}",
            data.len(),
            shape
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(crate::Error::Shape(format!(
                "expected NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        shape_check!(
            self.shape == other.shape,
            "{:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Copy of batch entry `i` as a rank-4 tensor with `n = 1`.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        shape_check!(i < n, "batch index {i} out of range for n = {n}");
        let plane = c * h * w;
        Ok(Tensor {
            shape: vec![1, c, h, w],
            data: self.data[i * plane..(i + 1) * plane].to_vec(),
        })
    }

    /// Stack rank-4 tensors with `n = 1` (or more) along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        shape_check!(!items.is_empty(), "cannot stack zero tensors");
        let (_, c, h, w) = items[0].dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            shape_check!(
                (tc, th, tw) == (c, h, w),
                "stack: {:?} vs {:?}",
                t.shape,
                items[0].shape
            );
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data,
        })
    }
}

/// Geometry of a patch unfolding: an image of `channels × h × w` scanned
/// by a `k × k` window with the given stride and zero padding, producing an
/// `out_h × out_w` grid of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Unfold {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Unfold {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output positions `o` along one axis for which
    /// `o*stride + tap - pad` falls inside `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out: usize) -> (usize, usize) {
        let off = tap as isize - self.pad as isize;
        let s = self.stride as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len-1, exclusive bound
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = (lo.max(0) as usize).min(out);
        let hi = (hi.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }

    /// `cols[(c,ky,kx), (oy,ox)] = img[c, oy*stride+ky-pad, ox*stride+kx-pad]`.
    pub fn im2col<F: Float>(&self, img: &[F], cols: &mut [F]) {
        let ncols = self.cols();
        debug_assert_eq!(img.len(), self.channels * self.h * self.w);
        debug_assert_eq!(cols.len(), self.rows() * ncols);
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid(ky, self.h, self.out_h);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid(kx, self.w, self.out_w);
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    dst.fill(F::zero());
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let ix0 = ox0 + kx - self.pad;
                            d[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                d[ox] = src_row[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: scatter-add columns back into `img`.
    pub fn col2im<F: Float>(&self, cols: &[F], img: &mut [F]) {
        let ncols = self.cols();
        debug_assert_eq!(img.len(), self.channels * self.h * self.w);
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid(ky, self.h, self.out_h);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid(kx, self.w, self.out_w);
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let s = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let ix0 = ox0 + kx - self.pad;
                            for (d, &v) in dst_row[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&s[ox0..ox1]) {
                                *d += v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst_row[ox * self.stride + kx - self.pad] += s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output length of a strided convolution along one axis.
pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub(crate) fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len - 1) * stride + k).checked_sub(2 * pad)
}
