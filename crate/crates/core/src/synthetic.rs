//! Procedural HR images: flat and graded regions, hard-edged shapes,
//! strokes and periodic textures.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::imaging::{save_image, ColorSpace, Image};

/// Supersampling factor per axis used to anti-alias edges.
const SUPERSAMPLE: usize = 3;

enum Shape {
    Rect { cy: f64, cx: f64, hh: f64, hw: f64, angle: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Triangle { p: [(f64, f64); 3] },
    Stroke { y0: f64, x0: f64, y1: f64, x1: f64, half_width: f64 },
    Ring { cy: f64, cx: f64, r: f64, half_width: f64 },
}

enum Fill {
    Solid([f64; 3]),
    /// Stripes: two colors, period (px), orientation.
    Stripes { a: [f64; 3], b: [f64; 3], period: f64, angle: f64 },
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

struct Layer {
    shape: Shape,
    fill: Fill,
}

fn rotate(y: f64, x: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * y - s * x, s * y + c * x)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { cy, cx, hh, hw, angle } => {
                let (u, v) = rotate(y - cy, x - cx, angle);
                u.abs() <= hh && v.abs() <= hw
            }
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (u, v) = rotate(y - cy, x - cx, angle);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Triangle { p } => {
                let q = (y, x);
                let d = [cross(p[0], p[1], q), cross(p[1], p[2], q), cross(p[2], p[0], q)];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Stroke { y0, x0, y1, x1, half_width } => {
                let (dy, dx) = (y1 - y0, x1 - x0);
                let len2 = dy * dy + dx * dx;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((y - y0) * dy + (x - x0) * dx) / len2).clamp(0.0, 1.0)
                };
                let (py, px) = (y0 + t * dy, x0 + t * dx);
                ((y - py).powi(2) + (x - px).powi(2)).sqrt() <= half_width
            }
            Shape::Ring { cy, cx, r, half_width } => {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (d - r).abs() <= half_width
            }
        }
    }
}

impl Fill {
    fn color(&self, y: f64, x: f64) -> [f64; 3] {
        match *self {
            Fill::Solid(c) => c,
            Fill::Stripes { a, b, period, angle } => {
                let (u, _) = rotate(y, x, angle);
                if (u / period).rem_euclid(1.0) < 0.5 {
                    a
                } else {
                    b
                }
            }
            Fill::Checker { a, b, cell } => {
                let i = (y / cell).floor() as i64 + (x / cell).floor() as i64;
                if i.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn random_fill<R: Rng + ?Sized>(rng: &mut R) -> Fill {
    match rng.random_range(0..10) {
        0..=5 => Fill::Solid(random_color(rng)),
        6..=8 => Fill::Stripes {
            a: random_color(rng),
            b: random_color(rng),
            period: rng.random_range(3.0..14.0),
            angle: rng.random_range(0.0..PI),
        },
        _ => Fill::Checker {
            a: random_color(rng),
            b: random_color(rng),
            cell: rng.random_range(3.0..10.0),
        },
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, h: f64, w: f64) -> Shape {
    let scale = h.min(w);
    let cy = rng.random_range(0.0..h);
    let cx = rng.random_range(0.0..w);
    match rng.random_range(0..5) {
        0 => Shape::Rect {
            cy,
            cx,
            hh: rng.random_range(0.04..0.3) * scale,
            hw: rng.random_range(0.04..0.3) * scale,
            angle: rng.random_range(0.0..PI),
        },
        1 => Shape::Ellipse {
            cy,
            cx,
            ry: rng.random_range(0.04..0.3) * scale,
            rx: rng.random_range(0.04..0.3) * scale,
            angle: rng.random_range(0.0..PI),
        },
        2 => {
            let r = rng.random_range(0.08..0.4) * scale;
            let mut vertex = || (cy + rng.random_range(-r..r), cx + rng.random_range(-r..r));
            Shape::Triangle {
                p: [vertex(), vertex(), vertex()],
            }
        }
        3 => {
            let len = rng.random_range(0.1..0.7) * scale;
            let a = rng.random_range(0.0..2.0 * PI);
            Shape::Stroke {
                y0: cy,
                x0: cx,
                y1: cy + len * a.sin(),
                x1: cx + len * a.cos(),
                half_width: rng.random_range(0.4..3.0),
            }
        }
        _ => Shape::Ring {
            cy,
            cx,
            r: rng.random_range(0.05..0.3) * scale,
            half_width: rng.random_range(0.5..3.0),
        },
    }
}

/// One `height × width` RGB image determined by `seed`.
pub fn synth_image(height: usize, width: usize, seed: u64) -> Result<Image> {
    contract!(height >= 1 && width >= 1, "synthetic image must be at least 1x1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let n_layers = rng.random_range(6..16);
    let layers: Vec<Layer> = (0..n_layers)
        .map(|_| Layer {
            shape: random_shape(&mut rng, h, w),
            fill: random_fill(&mut rng),
        })
        .collect();
    let (gs, gc) = grad_angle.sin_cos();
    let diag = (h * h + w * w).sqrt();
    let ss = SUPERSAMPLE as f64;
    Image::from_fn(height, width, ColorSpace::Rgb, |y, x, ch| {
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) / ss;
                let px = x as f64 + (sx as f64 + 0.5) / ss;
                let t = (0.5 + (py * gs + px * gc) / diag).clamp(0.0, 1.0);
                let mut v = c0[ch] * (1.0 - t) + c1[ch] * t;
                for layer in &layers {
                    if layer.shape.contains(py, px) {
                        v = layer.fill.color(py, px)[ch];
                    }
                }
                acc += v;
            }
        }
        acc / (ss * ss)
    })
}

/// Writes `count` images named `<prefix>_NNNN.png`; image `i` uses seed
/// `seed * 1_000_003 + i`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    prefix: &str,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let img = synth_image(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            let path = dir.join(format!("{prefix}_{i:04}.png"));
            save_image(&img, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_image(40, 48, 7).unwrap();
        assert_eq!(a, synth_image(40, 48, 7).unwrap());
        assert_ne!(a, synth_image(40, 48, 8).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a.height(), a.width(), a.channels()), (40, 48, 3));
    }
}
