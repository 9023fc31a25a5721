//! Dense image container and the pixel-space primitives the pipeline needs:
//! bilinear resize, cropping, replicate-padded windowing, separable Gaussian
//! blur, rotation with edge fill, and 8-bit PNG round-tripping.
//!
//! Pixels are `f32` in `[0, 1]`, stored planar (channel-major): index
//! `c * h * w + y * w + x`.

use crate::error::{Error, Result};
use std::path::Path;

/// Axis-aligned integer rectangle, origin at top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: i64, y: i64, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        px >= self.x && py >= self.y && px < self.x + self.w as i64 && py < self.y + self.h as i64
    }

    /// Area of the intersection with `other`, in pixels.
    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w as i64).min(other.x + other.w as i64);
        let y1 = (self.y + self.h as i64).min(other.y + other.h as i64);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    /// Whether `other` lies fully inside `self`.
    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w as i64 <= self.x + self.w as i64
            && other.y + other.h as i64 <= self.y + self.h as i64
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f32) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "image buffer length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Image { h, w, c, data })
    }

    /// Build from a per-pixel function `(x, y, channel) -> value`.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut img = Image::zeros(h, w, c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.data[ch * h * w + y * w + x] = f(x, y, ch);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// One channel plane as a slice.
    pub fn plane(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f32 {
        self.data[ch * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f32) {
        self.data[ch * self.h * self.w + y * self.w + x] = v;
    }

    /// Clamped read: out-of-bounds coordinates replicate the nearest edge.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, ch: usize) -> f32 {
        let cx = x.clamp(0, self.w as i64 - 1) as usize;
        let cy = y.clamp(0, self.h as i64 - 1) as usize;
        self.get(cx, cy, ch)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Snap every pixel to the 8-bit grid `k / 255`, so that a PNG round trip
    /// reproduces the in-memory buffer bit-exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Exact sub-image; the rectangle must lie inside the image.
    pub fn crop(&self, rect: Rect) -> Result<Image> {
        let bounds = Rect::new(0, 0, self.w, self.h);
        if !bounds.contains_rect(&rect) || rect.w == 0 || rect.h == 0 {
            return Err(Error::invalid(format!(
                "crop rect {:?} out of bounds for {}x{} image",
                rect, self.w, self.h
            )));
        }
        let mut out = Image::zeros(rect.h, rect.w, self.c);
        for ch in 0..self.c {
            for y in 0..rect.h {
                let sy = rect.y as usize + y;
                let src = ch * self.h * self.w + sy * self.w + rect.x as usize;
                let dst = ch * rect.h * rect.w + y * rect.w;
                out.data[dst..dst + rect.w].copy_from_slice(&self.data[src..src + rect.w]);
            }
        }
        Ok(out)
    }

    /// Windowed read with replicate padding for the out-of-bounds region.
    pub fn window_replicated(&self, rect: Rect) -> Image {
        let mut out = Image::zeros(rect.h, rect.w, self.c);
        for ch in 0..self.c {
            for y in 0..rect.h {
                for x in 0..rect.w {
                    let v = self.get_clamped(rect.x + x as i64, rect.y + y as i64, ch);
                    out.set(x, y, ch, v);
                }
            }
        }
        out
    }

    /// Bilinear resize using the half-pixel center convention. Resizing to
    /// the current size is an exact identity.
    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Image {
        if nh == self.h && nw == self.w {
            return self.clone();
        }
        let mut out = Image::zeros(nh, nw, self.c);
        let sy = self.h as f64 / nh as f64;
        let sx = self.w as f64 / nw as f64;
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = (fx - x0 as f64) as f32;
                for ch in 0..self.c {
                    let tl = self.get(x0, y0, ch);
                    let tr = self.get(x1, y0, ch);
                    let bl = self.get(x0, y1, ch);
                    let br = self.get(x1, y1, ch);
                    let top = tl + (tr - tl) * wx;
                    let bot = bl + (br - bl) * wx;
                    out.set(x, y, ch, top + (bot - top) * wy);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with replicate boundary. `sigma <= 0.05` is
    /// treated as identity.
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.05 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let s2 = 2.0 * (sigma as f64) * (sigma as f64);
        for i in -radius..=radius {
            kernel.push((-(i as f64) * (i as f64) / s2).exp());
        }
        let sum: f64 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| (k / sum) as f32).collect();

        let mut tmp = Image::zeros(self.h, self.w, self.c);
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0f32;
                    for (i, &k) in kernel.iter().enumerate() {
                        let sx = x as i64 + i as i64 - radius;
                        acc += k * self.get_clamped(sx, y as i64, ch);
                    }
                    tmp.set(x, y, ch, acc);
                }
            }
        }
        let mut out = Image::zeros(self.h, self.w, self.c);
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0f32;
                    for (i, &k) in kernel.iter().enumerate() {
                        let sy = y as i64 + i as i64 - radius;
                        acc += k * tmp.get_clamped(x as i64, sy, ch);
                    }
                    out.set(x, y, ch, acc);
                }
            }
        }
        out
    }

    /// Rotate counter-clockwise by `degrees` about the image center with
    /// bilinear sampling and replicate edge fill. Output has the same shape.
    pub fn rotate(&self, degrees: f32) -> Image {
        if degrees == 0.0 {
            return self.clone();
        }
        let theta = (degrees as f64).to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let cx = (self.w as f64 - 1.0) / 2.0;
        let cy = (self.h as f64 - 1.0) / 2.0;
        let mut out = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                // Inverse map: rotate the output coordinate by -theta.
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let sx = cos_t * dx - sin_t * dy + cx;
                let sy = sin_t * dx + cos_t * dy + cy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let wx = (sx - x0) as f32;
                let wy = (sy - y0) as f32;
                for ch in 0..self.c {
                    let tl = self.get_clamped(x0 as i64, y0 as i64, ch);
                    let tr = self.get_clamped(x0 as i64 + 1, y0 as i64, ch);
                    let bl = self.get_clamped(x0 as i64, y0 as i64 + 1, ch);
                    let br = self.get_clamped(x0 as i64 + 1, y0 as i64 + 1, ch);
                    let top = tl + (tr - tl) * wx;
                    let bot = bl + (br - bl) * wx;
                    out.set(x, y, ch, top + (bot - top) * wy);
                }
            }
        }
        out
    }

    /// Brightness shift then contrast scale about 0.5, clamped to `[0, 1]`.
    pub fn adjust(&self, brightness: f32, contrast: f32) -> Image {
        if brightness == 0.0 && contrast == 1.0 {
            return self.clone();
        }
        let mut out = self.clone();
        for v in &mut out.data {
            *v = ((*v + brightness - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
        }
        out
    }

    /// Write as 8-bit PNG (grayscale for 1 channel, RGB for 3).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let wbuf = std::io::BufWriter::new(file);
        let mut enc = png::Encoder::new(wbuf, self.w as u32, self.h as u32);
        let color = match self.c {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::invalid(format!("cannot encode {c}-channel png"))),
        };
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let mut bytes = vec![0u8; self.h * self.w * self.c];
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    bytes[(y * self.w + x) * self.c + ch] =
                        (self.get(x, y, ch).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        writer.write_image_data(&bytes)?;
        Ok(())
    }

    /// Read an 8-bit grayscale or RGB PNG into `[0, 1]` floats.
    pub fn load_png(path: &Path) -> Result<Image> {
        let file = std::fs::File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let c = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::CorruptFile {
                    path: path.display().to_string(),
                    reason: format!("unsupported png color type {other:?}"),
                })
            }
        };
        let mut img = Image::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = buf[(y * w + x) * c + ch] as f32 / 255.0;
                    img.set(x, y, ch, v);
                }
            }
        }
        Ok(img)
    }
}
