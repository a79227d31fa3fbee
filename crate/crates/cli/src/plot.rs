//! Line charts rasterized straight into PNG images.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dssr::imaging::{save_image, ColorSpace, Image};
use dssr::training::read_log;

use crate::{io_err, CliError};

const W: usize = 720;
const H: usize = 480;
const LEFT: usize = 80;
const RIGHT: usize = 180;
const TOP: usize = 40;
const BOTTOM: usize = 60;

const PALETTE: [[f64; 3]; 8] = [
    [0.12, 0.47, 0.71],
    [0.84, 0.15, 0.16],
    [0.17, 0.63, 0.17],
    [1.00, 0.50, 0.05],
    [0.58, 0.40, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.50, 0.50, 0.50],
];

/// 5×7 glyphs, one byte per row, bit 4 = leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [14, 17, 19, 21, 25, 17, 14],
        '1' => [4, 12, 4, 4, 4, 4, 14],
        '2' => [14, 17, 1, 2, 4, 8, 31],
        '3' => [31, 2, 4, 2, 1, 17, 14],
        '4' => [2, 6, 10, 18, 31, 2, 2],
        '5' => [31, 16, 30, 1, 1, 17, 14],
        '6' => [6, 8, 16, 30, 17, 17, 14],
        '7' => [31, 1, 2, 4, 8, 8, 8],
        '8' => [14, 17, 17, 14, 17, 17, 14],
        '9' => [14, 17, 17, 15, 1, 2, 12],
        'A' => [14, 17, 17, 31, 17, 17, 17],
        'B' => [30, 17, 17, 30, 17, 17, 30],
        'C' => [14, 17, 16, 16, 16, 17, 14],
        'D' => [28, 18, 17, 17, 17, 18, 28],
        'E' => [31, 16, 16, 30, 16, 16, 31],
        'F' => [31, 16, 16, 30, 16, 16, 16],
        'G' => [14, 17, 16, 23, 17, 17, 15],
        'H' => [17, 17, 17, 31, 17, 17, 17],
        'I' => [14, 4, 4, 4, 4, 4, 14],
        'J' => [7, 2, 2, 2, 2, 18, 12],
        'K' => [17, 18, 20, 24, 20, 18, 17],
        'L' => [16, 16, 16, 16, 16, 16, 31],
        'M' => [17, 27, 21, 21, 17, 17, 17],
        'N' => [17, 17, 25, 21, 19, 17, 17],
        'O' => [14, 17, 17, 17, 17, 17, 14],
        'P' => [30, 17, 17, 30, 16, 16, 16],
        'Q' => [14, 17, 17, 17, 21, 18, 13],
        'R' => [30, 17, 17, 30, 20, 18, 17],
        'S' => [15, 16, 16, 14, 1, 1, 30],
        'T' => [31, 4, 4, 4, 4, 4, 4],
        'U' => [17, 17, 17, 17, 17, 17, 14],
        'V' => [17, 17, 17, 17, 17, 10, 4],
        'W' => [17, 17, 17, 21, 21, 21, 10],
        'X' => [17, 17, 10, 4, 10, 17, 17],
        'Y' => [17, 17, 17, 10, 4, 4, 4],
        'Z' => [31, 1, 2, 4, 8, 16, 31],
        '.' => [0, 0, 0, 0, 0, 12, 12],
        ',' => [0, 0, 0, 0, 12, 4, 8],
        '-' => [0, 0, 0, 31, 0, 0, 0],
        '+' => [0, 4, 4, 31, 4, 4, 0],
        '=' => [0, 0, 31, 0, 31, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 31],
        ':' => [0, 12, 12, 0, 12, 12, 0],
        '/' => [0, 1, 2, 4, 8, 16, 0],
        '(' => [2, 4, 8, 8, 8, 4, 2],
        ')' => [8, 4, 2, 2, 2, 4, 8],
        ' ' => [0; 7],
        _ => [31, 17, 17, 17, 17, 17, 31],
    }
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new() -> Result<Self, CliError> {
        Ok(Canvas {
            img: Image::filled(H, W, ColorSpace::Rgb, 1.0)?,
        })
    }

    fn put(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            for (ch, v) in c.iter().enumerate() {
                self.img.set(y as usize, x as usize, ch, *v);
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [f64; 3], thick: i64) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
            for dy in 0..thick {
                for dx in 0..thick {
                    self.put(x + dx - thick / 2, y + dy - thick / 2, c);
                }
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [f64; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (r, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (16 >> col) != 0 {
                        self.put(x + 6 * i as i64 + col, y + r as i64, c);
                    }
                }
            }
        }
    }

    fn text_vertical(&mut self, x: i64, y: i64, s: &str, c: [f64; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (r, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (16 >> col) != 0 {
                        self.put(x + r as i64, y - 6 * i as i64 - col, c);
                    }
                }
            }
        }
    }
}

/// A named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

/// Labels with just enough decimals to tell neighbouring ticks apart.
fn fmt_ticks(ticks: &[f64]) -> Vec<String> {
    let step = ticks.windows(2).map(|w| w[1] - w[0]).fold(f64::MAX, f64::min);
    let big = ticks.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if step == f64::MAX || big >= 1e5 || (big > 0.0 && big < 1e-3) {
        return ticks.iter().map(|v| format!("{v:.1e}")).collect();
    }
    let mut decimals = 0;
    while decimals < 6 && ticks.iter().any(|v| ((v * 10f64.powi(decimals)).round() - v * 10f64.powi(decimals)).abs() > 1e-6) {
        decimals += 1;
    }
    ticks.iter().map(|v| format!("{v:.*}", decimals as usize)).collect()
}

/// Renders `series` as a line chart with markers.
pub fn line_chart(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> Result<(), CliError> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(CliError::Runtime(format!("nothing to plot for {}", path.display())));
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let (pw, ph) = ((W - LEFT - RIGHT) as f64, (H - TOP - BOTTOM) as f64);
    let sx = |x: f64| LEFT as f64 + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP as f64 + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut cv = Canvas::new()?;
    let (black, grid) = ([0.0; 3], [0.88; 3]);
    let yt = nice_ticks(y0, y1, 6);
    for (&t, label) in yt.iter().zip(fmt_ticks(&yt)) {
        let y = sy(t);
        cv.line(LEFT as f64, y, LEFT as f64 + pw, y, grid, 1);
        cv.text(LEFT as i64 - 8 - 6 * label.len() as i64, y as i64 - 3, &label, black);
    }
    let xt = nice_ticks(x0, x1, 6);
    for (&t, label) in xt.iter().zip(fmt_ticks(&xt)) {
        let x = sx(t);
        cv.line(x, TOP as f64, x, TOP as f64 + ph, grid, 1);
        cv.text(x as i64 - 3 * label.len() as i64, (TOP as f64 + ph) as i64 + 8, &label, black);
    }
    cv.line(LEFT as f64, TOP as f64, LEFT as f64, TOP as f64 + ph, black, 1);
    cv.line(LEFT as f64, TOP as f64 + ph, LEFT as f64 + pw, TOP as f64 + ph, black, 1);
    cv.text((W as i64 - 6 * title.len() as i64) / 2, 14, title, black);
    cv.text(LEFT as i64 + (pw as i64 - 6 * xlabel.len() as i64) / 2, H as i64 - 24, xlabel, black);
    cv.text_vertical(14, TOP as i64 + (ph as i64 + 6 * ylabel.len() as i64) / 2, ylabel, black);

    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let finite: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for w in finite.windows(2) {
            cv.line(sx(w[0].0), sy(w[0].1), sx(w[1].0), sy(w[1].1), c, 2);
        }
        if finite.len() <= 40 {
            for &(x, y) in &finite {
                let (px, py) = (sx(x) as i64, sy(y) as i64);
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        cv.put(px + dx, py + dy, c);
                    }
                }
            }
        }
        let ly = TOP as i64 + 10 + 16 * i as i64;
        let lx = (LEFT as f64 + pw) as i64 + 12;
        cv.line(lx as f64, ly as f64 + 3.0, lx as f64 + 16.0, ly as f64 + 3.0, c, 2);
        let name: String = s.name.chars().take(24).collect();
        cv.text(lx + 22, ly, &name, black);
    }
    save_image(&cv.img, path)?;
    Ok(())
}

/// Parsed metric report (`metrics.csv`).
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| CliError::Runtime(format!("{} is empty", path.display())))?;
        Ok(ReportTable {
            columns: header.split(',').map(str::to_string).collect(),
            rows: lines.map(|l| l.split(',').map(str::to_string).collect()).collect(),
        })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn value(&self, row: &[String], col: usize) -> f64 {
        row.get(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
    }

    /// Columns `<prefix>1, <prefix>2, ...` in step order.
    fn step_cols(&self, prefix: &str) -> Vec<usize> {
        (1..)
            .map_while(|t| self.col(&format!("{prefix}{t}")))
            .collect()
    }

    /// Mean over rows of each `<prefix>t` column.
    pub fn step_means(&self, prefix: &str) -> Vec<(f64, f64)> {
        self.step_cols(prefix)
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let m = self.rows.iter().map(|r| self.value(r, c)).sum::<f64>() / self.rows.len().max(1) as f64;
                ((t + 1) as f64, m)
            })
            .collect()
    }

    /// Final-step PSNR averaged per kernel width.
    pub fn psnr_by_sigma(&self) -> Vec<(f64, f64)> {
        let (Some(sc), Some(&pc)) = (self.col("sigma"), self.step_cols("psnr_y_t").last()) else {
            return Vec::new();
        };
        let mut acc: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let s = self.value(r, sc);
            let e = acc.entry((s * 1e6).round() as i64).or_insert((s, 0.0, 0));
            e.1 += self.value(r, pc);
            e.2 += 1;
        }
        acc.values().map(|&(s, sum, n)| (s, sum / n as f64)).collect()
    }
}

fn label_of(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "metrics" || stem == "train_log" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

/// Averages consecutive points so that at most `max` remain.
fn thin(points: Vec<(f64, f64)>, max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max {
        return points;
    }
    let k = points.len().div_ceil(max);
    points
        .chunks(k)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

/// Writes every figure the inputs support; returns the written paths.
pub fn render_all(logs: &[PathBuf], reports: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    if !logs.is_empty() {
        let mut total = Vec::new();
        let mut detail = Vec::new();
        for p in logs {
            let recs = read_log(p)?;
            let name = label_of(p);
            let pts = |f: fn(&dssr::training::LossRecord) -> f64| {
                thin(recs.iter().map(|r| (r.iter as f64, f(r).max(1e-12).log10())).collect(), 400)
            };
            total.push(Series {
                name: name.clone(),
                points: pts(|r| r.total),
            });
            detail.push(Series {
                name,
                points: pts(|r| r.detail_loss),
            });
        }
        let p = out.join("loss_total.png");
        line_chart(&p, "training loss", "iteration", "log10 total loss", &total)?;
        written.push(p);
        let p = out.join("loss_detail.png");
        line_chart(&p, "detail loss", "iteration", "log10 detail L1 (sum over t)", &detail)?;
        written.push(p);
    }
    if !reports.is_empty() {
        let tables: Vec<(String, ReportTable)> = reports
            .iter()
            .map(|p| Ok((label_of(p), ReportTable::read(p)?)))
            .collect::<Result<_, CliError>>()?;
        let mk = |f: &dyn Fn(&ReportTable) -> Vec<(f64, f64)>| -> Vec<Series> {
            tables
                .iter()
                .map(|(n, t)| Series {
                    name: n.clone(),
                    points: f(t),
                })
                .collect()
        };
        let p = out.join("detail_l1_vs_t.png");
        line_chart(&p, "detail L1 over steps", "step t", "mean detail L1", &mk(&|t| t.step_means("detail_l1_t")))?;
        written.push(p);
        let p = out.join("psnr_vs_t.png");
        line_chart(&p, "PSNR-Y over steps", "step t", "mean PSNR-Y (dB)", &mk(&|t| t.step_means("psnr_y_t")))?;
        written.push(p);
        let by_sigma = mk(&|t| t.psnr_by_sigma());
        if by_sigma.iter().any(|s| s.points.len() > 1) {
            let p = out.join("psnr_vs_sigma.png");
            line_chart(&p, "PSNR-Y over kernel width", "kernel width", "final-step PSNR-Y (dB)", &by_sigma)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.13, 0.87, 6);
        assert!(t.first().unwrap() >= &0.13 && t.last().unwrap() <= &0.87);
        assert!(t.len() >= 3);
        assert_eq!(nice_ticks(0.0, 10.0, 5), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn tick_labels_share_precision() {
        assert_eq!(fmt_ticks(&[0.8, 1.0, 1.2]), vec!["0.8", "1.0", "1.2"]);
        assert_eq!(fmt_ticks(&[-0.75, -0.5, -0.25, 0.0]), vec!["-0.75", "-0.50", "-0.25", "0.00"]);
        assert_eq!(fmt_ticks(&[0.0, 500.0, 1000.0]), vec!["0", "500", "1000"]);
    }

    #[test]
    fn thinning_keeps_mean() {
        let pts: Vec<(f64, f64)> = (0..1000).map(|i| (i as f64, 1.0)).collect();
        let t = thin(pts, 100);
        assert_eq!(t.len(), 100);
        assert!(t.iter().all(|p| p.1 == 1.0));
    }
}
