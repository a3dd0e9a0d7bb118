//! Minimal raster plots (no text rendering): matrix heatmaps and line charts.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Viridis-like ramp sampled at five anchors, linearly interpolated.
pub fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (ANCHORS.len() - 1) as f64;
    let k = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (ANCHORS[k][c] * (1.0 - f) + ANCHORS[k + 1][c] * f).round() as u8;
    }
    out
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `values` (row-major `rows × cols`) as a heatmap with `cell`-pixel squares,
/// mapping `[lo, hi]` onto the color ramp.
pub fn heatmap(path: &Path, values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64, cell: usize) -> Result<()> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("{} values for a {rows}x{cols} heatmap", values.len())));
    }
    let cell = cell.max(1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (r, c) = (y as usize / cell, x as usize / cell);
        *px = Rgb(colormap((values[r * cols + c] - lo) / span));
    }
    save(&img, path)
}

/// One polyline of a line chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Distinct colors for up to ten series, then repeating.
pub fn palette(k: usize) -> [u8; 3] {
    const P: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    P[k % P.len()]
}

/// Line chart over `x_range × y_range`; `guides` are dashed horizontal lines.
pub fn line_chart(
    path: &Path,
    series: &[Series],
    x_range: (f64, f64),
    y_range: (f64, f64),
    guides: &[f64],
    size: (u32, u32),
) -> Result<()> {
    let (w, h) = size;
    let margin = 8i64;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w as i64 - 2 * margin, h as i64 - 2 * margin);
    if pw <= 0 || ph <= 0 {
        return Err(Error::InvalidArgument(format!("plot size {w}x{h} is too small")));
    }
    let sx = |x: f64| margin + ((x - x_range.0) / (x_range.1 - x_range.0).max(1e-12) * pw as f64).round() as i64;
    let sy = |y: f64| margin + ph - ((y - y_range.0) / (y_range.1 - y_range.0).max(1e-12) * ph as f64).round() as i64;
    let put = |img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for x in margin..=margin + pw {
        put(&mut img, x, margin + ph, [0, 0, 0]);
    }
    for y in margin..=margin + ph {
        put(&mut img, margin, y, [0, 0, 0]);
    }
    for &g in guides {
        let y = sy(g);
        for x in (margin..=margin + pw).step_by(4) {
            put(&mut img, x, y, [120, 120, 120]);
            put(&mut img, x + 1, y, [120, 120, 120]);
        }
    }
    for s in series {
        for seg in s.points.windows(2) {
            let (x0, y0, x1, y1) = (sx(seg[0].0), sy(seg[0].1), sx(seg[1].0), sy(seg[1].1));
            let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for k in 0..=n {
                let x = x0 + (x1 - x0) * k / n;
                let y = y0 + (y1 - y0) * k / n;
                put(&mut img, x, y, s.color);
                put(&mut img, x, y + 1, s.color);
            }
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn heatmap_cells_follow_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        heatmap(&path, &[0.0, 1.0, 1.0, 0.0], 2, 2, 0.0, 1.0, 3).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(0, 0).0, colormap(0.0));
        assert_eq!(img.get_pixel(4, 1).0, colormap(1.0));
        assert!(heatmap(&path, &[0.0], 2, 2, 0.0, 1.0, 3).is_err());
    }

    #[test]
    fn line_chart_draws_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let s = Series { points: vec![(0.0, 0.0), (1.0, 1.0)], color: [255, 0, 0] };
        line_chart(&path, &[s], (0.0, 1.0), (0.0, 1.0), &[0.5], (64, 48)).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert!(img.pixels().any(|p| p.0 == [255, 0, 0]));
    }
}
