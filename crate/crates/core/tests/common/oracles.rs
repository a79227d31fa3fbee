//! Independent reference implementations used to cross-check the library.
//!
//! Nothing here calls into the library's numerical code; each oracle is a
//! direct (and slow) transcription of the textbook definition.

#![allow(dead_code)]

use dssr::imaging::{ColorSpace, Image};

/// Keys cubic, `a = -0.5`, written in the piecewise polynomial form.
pub fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Symmetric (edge-repeating) index extension: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
fn symmetric(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = ((i % period) + period) % period;
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Dense `out × in` resampling matrix with anti-aliasing when shrinking.
pub fn bicubic_matrix(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let ratio = n_out as f64 / n_in as f64;
    let stretch = ratio.min(1.0);
    let support = 2.0 / stretch;
    let mut m = vec![vec![0.0; n_in]; n_out];
    for (o, row) in m.iter_mut().enumerate() {
        // 1-based source coordinate of 1-based output sample `o + 1`
        let u1 = (o + 1) as f64 / ratio + 0.5 * (1.0 - 1.0 / ratio);
        let u = u1 - 1.0;
        let lo = (u - support).floor() as i64 - 1;
        let hi = (u + support).ceil() as i64 + 1;
        for j in lo..=hi {
            let w = stretch * keys(stretch * (u - j as f64));
            row[symmetric(j, n_in as i64)] += w;
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    m
}

/// Bicubic resize evaluated as a full double sum per output pixel.
pub fn bicubic_reference(img: &Image, out_h: usize, out_w: usize) -> Image {
    let wr = bicubic_matrix(img.height(), out_h);
    let wc = bicubic_matrix(img.width(), out_w);
    Image::from_fn(out_h, out_w, img.colorspace(), |y, x, c| {
        let mut acc = 0.0;
        for (i, &a) in wr[y].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in wc[x].iter().enumerate() {
                acc += a * b * img.get(i, j, c);
            }
        }
        acc
    })
    .unwrap()
}

/// Reflection without edge repetition: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
fn reflect101(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Correlation with a `k×k` row-major kernel, reflect-padded, as a
/// double loop per output pixel.
pub fn blur_reference(img: &Image, weights: &[f64], k: usize) -> Image {
    let r = (k / 2) as i64;
    let (h, w) = (img.height() as i64, img.width() as i64);
    Image::from_fn(img.height(), img.width(), img.colorspace(), |y, x, c| {
        let mut acc = 0.0;
        for i in 0..k as i64 {
            for j in 0..k as i64 {
                let sy = reflect101(y as i64 + i - r, h);
                let sx = reflect101(x as i64 + j - r, w);
                acc += weights[(i * k as i64 + j) as usize] * img.get(sy, sx, c);
            }
        }
        acc
    })
    .unwrap()
}

/// Luma on the 0..255 scale from clamped RGB in `[0, 1]`.
fn luma255(img: &Image, y: usize, x: usize) -> f64 {
    let p = |c| img.get(y, x, c).clamp(0.0, 1.0) * 255.0;
    match img.colorspace() {
        ColorSpace::Rgb => 16.0 + (65.481 * p(0) + 128.553 * p(1) + 24.966 * p(2)) / 255.0,
        ColorSpace::Y => p(0),
    }
}

fn luma_plane(img: &Image, shave: usize) -> Vec<Vec<f64>> {
    (shave..img.height() - shave)
        .map(|y| (shave..img.width() - shave).map(|x| luma255(img, y, x)).collect())
        .collect()
}

pub fn psnr_reference(a: &Image, b: &Image, shave: usize) -> f64 {
    let (pa, pb) = (luma_plane(a, shave), luma_plane(b, shave));
    let mut se = 0.0;
    let mut n = 0.0;
    for (ra, rb) in pa.iter().zip(&pb) {
        for (u, v) in ra.iter().zip(rb) {
            se += (u - v).powi(2);
            n += 1.0;
        }
    }
    20.0 * (255.0 / (se / n).sqrt()).log10()
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5) normalized in 2-D, window
/// statistics gathered pixel by pixel at every valid position.
pub fn ssim_reference(a: &Image, b: &Image, shave: usize) -> f64 {
    let (pa, pb) = (luma_plane(a, shave), luma_plane(b, shave));
    let (h, w) = (pa.len(), pa[0].len());
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = win[i][j] / total;
                    ma += g * pa[y + i][x + j];
                    mb += g * pb[y + i][x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = win[i][j] / total;
                    let (da, db) = (pa[y + i][x + j] - ma, pb[y + i][x + j] - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

/// Unnormalized 2-D Gaussian divided by its brute-force sum.
pub fn gaussian_reference(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Mean absolute difference of two equally sized slices.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}
