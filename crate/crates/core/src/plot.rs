//! Minimal raster plotting: boxplots for the similarity/distance analyses
//! and class-colored scatter plots for 2-D projections. Everything renders
//! into an RGB buffer with a built-in 5x7 bitmap font and saves as PNG.

use crate::error::Result;
use crate::stats::percentile;
use std::path::Path;

pub struct Canvas {
    w: usize,
    h: usize,
    data: Vec<u8>,
}

pub type Color = [u8; 3];

pub const BLACK: Color = [20, 20, 20];
pub const GRAY: Color = [150, 150, 150];
pub const LIGHT: Color = [230, 230, 230];

/// Distinct colors for class/group coding.
pub const PALETTE: [Color; 12] = [
    [214, 69, 65],
    [52, 119, 219],
    [46, 158, 88],
    [230, 145, 28],
    [130, 78, 191],
    [22, 170, 170],
    [199, 55, 135],
    [120, 120, 40],
    [90, 60, 30],
    [60, 90, 160],
    [170, 120, 180],
    [40, 40, 40],
];

impl Canvas {
    pub fn new(w: usize, h: usize) -> Canvas {
        Canvas {
            w,
            h,
            data: vec![255u8; w * h * 3],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Color) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, c: Color) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.put(x, y, c);
        }
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, c: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.put(x, y, c);
        }
    }

    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        self.hline(x0, x1, y0, c);
        self.hline(x0, x1, y1, c);
        self.vline(x0, y0, y1, c);
        self.vline(x1, y0, y1, c);
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.hline(x0, x1, y, c);
        }
    }

    pub fn disc(&mut self, cx: i64, cy: i64, r: i64, c: Color) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    /// Draw text with the built-in 5x7 font (uppercased; unknown glyphs as
    /// hollow boxes).
    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Color) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph_for(ch.to_ascii_uppercase());
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        self.put(cx + col as i64, y + row as i64, c);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(crate::error::Error::from)?;
        writer
            .write_image_data(&self.data)
            .map_err(crate::error::Error::from)?;
        Ok(())
    }
}

fn glyph_for(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Boxplot: median line, interquartile box, whiskers at the most extreme
/// values within 1.5 IQR of the box, outliers as dots.
pub fn boxplot(path: &Path, title: &str, groups: &[(String, Vec<f64>)]) -> Result<()> {
    let w = (140 * groups.len().max(2) + 80).max(420);
    let h = 360;
    let mut canvas = Canvas::new(w, h);
    let (top, bottom, left) = (40i64, (h - 50) as i64, 60i64);
    canvas.text(12, 12, title, BLACK);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, vals) in groups {
        for &v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.08;
    let (lo, hi) = (lo - pad, hi + pad);
    let y_of = |v: f64| -> i64 {
        bottom - ((v - lo) / (hi - lo) * (bottom - top) as f64).round() as i64
    };

    // axes and horizontal guides
    canvas.vline(left, top, bottom, BLACK);
    canvas.hline(left, w as i64 - 20, bottom, BLACK);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        canvas.hline(left, w as i64 - 20, y, LIGHT);
        canvas.text(4, y - 3, &format!("{v:.2}"), GRAY);
    }

    let slot = ((w as i64 - left - 40) / groups.len() as i64).max(60);
    for (gi, (label, vals)) in groups.iter().enumerate() {
        if vals.is_empty() {
            continue;
        }
        let cx = left + slot / 2 + gi as i64 * slot;
        let half = (slot / 5).clamp(12, 40);
        let q1 = percentile(vals, 0.25);
        let q2 = percentile(vals, 0.5);
        let q3 = percentile(vals, 0.75);
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        let wlo = vals
            .iter()
            .cloned()
            .filter(|v| *v >= lo_fence)
            .fold(f64::INFINITY, f64::min);
        let whi = vals
            .iter()
            .cloned()
            .filter(|v| *v <= hi_fence)
            .fold(f64::NEG_INFINITY, f64::max);
        let color = PALETTE[gi % PALETTE.len()];

        canvas.vline(cx, y_of(whi), y_of(q3), BLACK);
        canvas.vline(cx, y_of(q1), y_of(wlo), BLACK);
        canvas.hline(cx - half / 2, cx + half / 2, y_of(whi), BLACK);
        canvas.hline(cx - half / 2, cx + half / 2, y_of(wlo), BLACK);
        canvas.fill_rect(cx - half, y_of(q3), cx + half, y_of(q1), [
            color[0].saturating_add(60),
            color[1].saturating_add(60),
            color[2].saturating_add(60),
        ]);
        canvas.rect(cx - half, y_of(q3), cx + half, y_of(q1), color);
        canvas.hline(cx - half, cx + half, y_of(q2), BLACK);
        for &v in vals {
            if v < lo_fence || v > hi_fence {
                canvas.disc(cx, y_of(v), 1, color);
            }
        }
        let lx = cx - (label.len() as i64 * 6) / 2;
        canvas.text(lx, bottom + 8, label, BLACK);
    }
    canvas.save(path)
}

/// Class-colored 2-D scatter with a legend.
pub fn scatter(path: &Path, title: &str, points: &[(f64, f64, u32)]) -> Result<()> {
    let (w, h) = (520usize, 440usize);
    let mut canvas = Canvas::new(w, h);
    canvas.text(12, 12, title, BLACK);
    if points.is_empty() {
        return canvas.save(path);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (left, right, top, bottom) = (50i64, w as i64 - 90, 40i64, h as i64 - 30);
    canvas.rect(left, top, right, bottom, GRAY);
    for &(x, y, class) in points {
        let px = left + ((x - x0) / (x1 - x0) * (right - left) as f64).round() as i64;
        let py = bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;
        canvas.disc(px, py, 2, PALETTE[class as usize % PALETTE.len()]);
    }
    let mut classes: Vec<u32> = points.iter().map(|p| p.2).collect();
    classes.sort_unstable();
    classes.dedup();
    for (i, class) in classes.iter().take(12).enumerate() {
        let y = top + 14 * i as i64;
        canvas.disc(right + 14, y + 3, 3, PALETTE[*class as usize % PALETTE.len()]);
        canvas.text(right + 22, y, &format!("C{class}"), BLACK);
    }
    canvas.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxplot_writes_png() {
        let dir = std::env::temp_dir().join("holon_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("box.png");
        let groups = vec![
            ("parts=2".to_string(), vec![0.1, 0.4, 0.5, 0.6, 0.9, 2.0]),
            ("parts=3".to_string(), vec![0.3, 0.5, 0.55, 0.6, 0.7]),
        ];
        boxplot(&path, "composition", &groups).unwrap();
        let img = crate::image::Image::load_png(&path).unwrap();
        assert!(img.width() >= 400);
        // something non-white got drawn
        assert!(img.data().iter().any(|&v| v < 0.9));
    }

    #[test]
    fn scatter_writes_png() {
        let dir = std::env::temp_dir().join("holon_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scatter.png");
        let points: Vec<(f64, f64, u32)> = (0..60)
            .map(|i| {
                let c = i % 3;
                (c as f64 * 2.0 + (i as f64 * 0.01), (i % 7) as f64, c as u32)
            })
            .collect();
        scatter(&path, "projection", &points).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn constant_group_does_not_panic() {
        let dir = std::env::temp_dir().join("holon_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("const.png");
        boxplot(&path, "degenerate", &[("a".into(), vec![1.0; 5])]).unwrap();
    }
}
