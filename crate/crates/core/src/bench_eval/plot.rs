//! Log-log scatter plots rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{MebtError, Result};

const PALETTE: [[u8; 3]; 6] = [
    [200, 40, 40],
    [30, 110, 200],
    [40, 160, 60],
    [200, 140, 20],
    [120, 60, 170],
    [40, 40, 40],
];

/// One series of `(x, y)` points, both positive.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Draws each series as connected markers on log2 axes with grid lines at
/// powers of two. Labels are not rasterized; series colors follow input
/// order.
pub fn plot_loglog(series: &[Series], path: impl AsRef<Path>) -> Result<()> {
    let (w, h, m) = (640u32, 480u32, 40.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|&(x, y)| x > 0.0 && y > 0.0)
        .collect();
    if pts.is_empty() {
        return Err(MebtError::config("nothing to plot"));
    }
    let lx = |x: f64| x.log2();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(lx(x));
        x1 = x1.max(lx(x));
        y0 = y0.min(lx(y));
        y1 = y1.max(lx(y));
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let px = |x: f64| m + (lx(x) - x0) / (x1 - x0) * (w as f64 - 2.0 * m);
    let py = |y: f64| h as f64 - m - (lx(y) - y0) / (y1 - y0) * (h as f64 - 2.0 * m);
    let grid = Rgb([225, 225, 225]);
    for e in x0 as i64..=x1 as i64 {
        let x = px(2f64.powi(e as i32)).round() as u32;
        for y in m as u32..=h - m as u32 {
            img.put_pixel(x.min(w - 1), y, grid);
        }
    }
    for e in y0 as i64..=y1 as i64 {
        let y = py(2f64.powi(e as i32)).round() as u32;
        for x in m as u32..=w - m as u32 {
            img.put_pixel(x, y.min(h - 1), grid);
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let visible: Vec<(f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|&(x, y)| x > 0.0 && y > 0.0)
            .map(|(x, y)| (px(x), py(y)))
            .collect();
        for pair in visible.windows(2) {
            let steps = ((pair[1].0 - pair[0].0).abs().max((pair[1].1 - pair[0].1).abs()) as usize).max(1);
            for k in 0..=steps {
                let f = k as f64 / steps as f64;
                let (x, y) = (
                    pair[0].0 + f * (pair[1].0 - pair[0].0),
                    pair[0].1 + f * (pair[1].1 - pair[0].1),
                );
                img.put_pixel((x as u32).min(w - 1), (y as u32).min(h - 1), color);
            }
        }
        for &(x, y) in &visible {
            for dy in -3i32..=3 {
                for dx in -3i32..=3 {
                    let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                    if xx >= 0 && yy >= 0 && (xx as u32) < w && (yy as u32) < h {
                        img.put_pixel(xx as u32, yy as u32, color);
                    }
                }
            }
        }
    }
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| MebtError::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let s = Series {
            label: "linear",
            points: vec![(512.0, 1.0), (1024.0, 2.0), (4096.0, 8.0)],
        };
        plot_loglog(&[s], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (640, 480));
        assert!(plot_loglog(&[], &path).is_err());
    }
}
