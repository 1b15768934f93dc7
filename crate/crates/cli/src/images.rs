//! Portable graymap/pixmap output and a minimal line-chart rasteriser.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Maps `values` linearly from `[lo, hi]` to `[0, 255]`.
pub fn gray_scale(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Nearest-neighbour upscaling of a grayscale image.
pub fn upscale(pixels: &[u8], width: usize, height: usize, factor: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() * factor * factor);
    for r in 0..height * factor {
        for c in 0..width * factor {
            out.push(pixels[(r / factor) * width + c / factor]);
        }
    }
    out
}

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

/// Class-colour preview of a label map given per-pixel classes.
pub fn class_preview(classes: &[usize], k: usize) -> Vec<u8> {
    classes
        .iter()
        .flat_map(|&c| if k == 2 { [[0, 0, 0], [255, 255, 255]][c] } else { PALETTE[c % PALETTE.len()] })
        .collect()
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// RGB canvas with a plot frame.
pub struct Chart {
    pub width: usize,
    pub height: usize,
    rgb: Vec<u8>,
    margin: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    log_x: bool,
}

impl Chart {
    pub fn new(width: usize, height: usize, series: &[Series], log_x: bool) -> Chart {
        let tx = |x: f64| if log_x { x.max(f64::MIN_POSITIVE).log10() } else { x };
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(tx(x));
            x1 = x1.max(tx(x));
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(x1 > x0) {
            x1 = x0 + 1.0;
        }
        if !(y1 > y0) {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        let mut chart = Chart {
            width,
            height,
            rgb: vec![255; 3 * width * height],
            margin: 24,
            x_range: (x0, x1),
            y_range: (y0 - pad, y1 + pad),
            log_x,
        };
        chart.frame();
        for (i, s) in series.iter().enumerate() {
            chart.polyline(&s.points, PALETTE[i % PALETTE.len()]);
            chart.swatch(i, PALETTE[i % PALETTE.len()]);
        }
        chart
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn frame(&mut self) {
        let (m, w, h) = (self.margin as i64, self.width as i64, self.height as i64);
        let axis = [0, 0, 0];
        self.line((m, h - m), (w - m, h - m), axis);
        self.line((m, m), (m, h - m), axis);
        for i in 0..=4 {
            let x = m + i * (w - 2 * m) / 4;
            let y = m + i * (h - 2 * m) / 4;
            self.line((x, h - m), (x, h - m + 4), axis);
            self.line((m - 4, y), (m, y), axis);
        }
    }

    fn to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let x = if self.log_x { x.max(f64::MIN_POSITIVE).log10() } else { x };
        let (m, w, h) = (self.margin as f64, self.width as f64, self.height as f64);
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        ((m + fx * (w - 2.0 * m)).round() as i64, (h - m - fy * (h - 2.0 * m)).round() as i64)
    }

    fn polyline(&mut self, points: &[(f64, f64)], c: [u8; 3]) {
        let px: Vec<(i64, i64)> = points.iter().map(|&(x, y)| self.to_pixel(x, y)).collect();
        for w in px.windows(2) {
            self.line(w[0], w[1], c);
        }
        for &(x, y) in &px {
            for d in -1..=1 {
                self.set(x + d, y, c);
                self.set(x, y + d, c);
            }
        }
    }

    /// Legend swatch in the top-right corner; series order matches the CSV.
    fn swatch(&mut self, index: usize, c: [u8; 3]) {
        let x0 = self.width as i64 - self.margin as i64 - 14;
        let y0 = self.margin as i64 + 4 + 8 * index as i64;
        for dy in 0..5 {
            self.line((x0, y0 + dy), (x0 + 10, y0 + dy), c);
        }
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.x_range
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y_range
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_scale_endpoints_and_degenerate_range() {
        assert_eq!(gray_scale(&[-1.0, 0.0, 1.0], -1.0, 1.0), vec![0, 128, 255]);
        assert_eq!(gray_scale(&[3.0, 3.0], 3.0, 3.0), vec![0, 0]);
    }

    #[test]
    fn chart_draws_each_series_in_its_colour() {
        let s = vec![
            Series { label: "a".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] },
            Series { label: "b".into(), points: vec![(0.0, 1.0), (1.0, 0.0)] },
        ];
        let chart = Chart::new(120, 80, &s, false);
        let count = |c: [u8; 3]| chart.rgb().chunks(3).filter(|p| *p == c).count();
        assert!(count(PALETTE[0]) > 50 && count(PALETTE[1]) > 50);
        assert_eq!(chart.rgb().len(), 3 * 120 * 80);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
