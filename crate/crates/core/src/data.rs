//! Hierarchical sampling pipeline: square anchor wholes at scale
//! `side / 2^level`, multi-scale center crops for the localizability branch,
//! exact-cover part partitions for the composability/decomposability
//! branches, and the stochastic augmentation family.
//!
//! Everything here is a pure function of its inputs and an explicit RNG
//! handle; concurrent samplers just own distinct streams.

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng::Pcg32;
use serde::{Deserialize, Serialize};

/// One training example: the anchor whole, its multi-scale crop set, and its
/// exact-cover part partition (rectangles in whole coordinates, images
/// resized to the network input size, canonical row-major order).
#[derive(Debug, Clone)]
pub struct AnchorSample {
    pub whole: Image,
    pub level: u32,
    pub crops: Vec<Image>,
    pub parts: Vec<(Image, Rect)>,
    pub source_id: usize,
}

/// Stochastic augmentation family: brightness/contrast jitter, Gaussian
/// blur, rotation with edge fill — applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Brightness shift up to +/- this value; contrast scale in `1 +/- this`.
    pub jitter_strength: f32,
    pub blur_sigma_range: (f32, f32),
    /// Rotation drawn uniformly from `+/- rotation_range` degrees.
    pub rotation_range: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_strength: 0.3,
            blur_sigma_range: (0.0, 1.0),
            rotation_range: 10.0,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: augment becomes a no-op.
    pub fn none() -> Self {
        AugmentConfig {
            jitter_strength: 0.0,
            blur_sigma_range: (0.0, 0.0),
            rotation_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jitter_strength < 0.0 {
            return Err(Error::invalid("jitter_strength must be non-negative"));
        }
        if self.blur_sigma_range.0 < 0.0 || self.blur_sigma_range.1 < self.blur_sigma_range.0 {
            return Err(Error::invalid(
                "blur_sigma_range must be a non-negative interval",
            ));
        }
        if self.rotation_range < 0.0 {
            return Err(Error::invalid("rotation_range must be non-negative"));
        }
        Ok(())
    }
}

/// Geometry knobs for anchor sampling shared by the trainer and the
/// zero-shot analyses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub crops_per_anchor: usize,
    /// Side of each multi-scale crop after resizing.
    pub crop_size: usize,
    /// Side of the global view the whole is resized to.
    pub global_size: usize,
    /// Crop centers shift from the whole's center by at most this fraction
    /// of the global side.
    pub center_jitter: f32,
    pub n_parts: usize,
    /// Partition split lines move by up to this fraction of the cell side.
    pub part_jitter: f32,
    /// Side each part image is resized to (the network input size).
    pub part_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            crops_per_anchor: 8,
            crop_size: 96,
            global_size: 224,
            center_jitter: 0.125,
            n_parts: 4,
            part_jitter: 0.2,
            part_size: 224,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crops_per_anchor == 0 {
            return Err(Error::invalid("crops_per_anchor must be >= 1"));
        }
        if self.crop_size == 0 || self.crop_size > self.global_size {
            return Err(Error::invalid(format!(
                "crop_size {} must lie in 1..={}",
                self.crop_size, self.global_size
            )));
        }
        if !(0.0..=0.25).contains(&self.center_jitter) {
            return Err(Error::invalid("center_jitter must lie in [0, 0.25]"));
        }
        if self.n_parts == 0 || self.n_parts > 16 {
            return Err(Error::invalid("n_parts must lie in 1..=16"));
        }
        if !(0.0..=0.4).contains(&self.part_jitter) {
            return Err(Error::invalid("part_jitter must lie in [0, 0.4]"));
        }
        if self.part_size == 0 {
            return Err(Error::invalid("part_size must be >= 1"));
        }
        Ok(())
    }
}

/// Square anchor of side `floor(min_side / 2^level)` at a uniformly random
/// position inside the image. Level 0 returns the whole image.
pub fn sample_anchor(image: &Image, level: u32, rng: &mut Pcg32) -> Result<Image> {
    if level == 0 {
        // consume the position draws anyway so the stream stays aligned
        let _ = (rng.next_u32(), rng.next_u32());
        return Ok(image.clone());
    }
    let min_side = image.width().min(image.height());
    let denom = 1usize
        .checked_shl(level)
        .ok_or_else(|| Error::invalid(format!("level {level} too large")))?;
    let side = min_side / denom;
    if side == 0 {
        return Err(Error::invalid(format!(
            "level {level} too large for a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let x = rng.range_usize(0, image.width() - side + 1);
    let y = rng.range_usize(0, image.height() - side + 1);
    image.crop(Rect::new(x as i64, y as i64, side, side))
}

/// Anchor side produced by [`sample_anchor`] at a given level.
pub fn anchor_side(image_side: usize, level: u32) -> usize {
    image_side >> level
}

/// Multi-scale crops with their pre-resize rectangles in global-view
/// coordinates. Crop sides are uniform in `[crop_size, global_size / 2]`;
/// centers sit at the whole's center displaced by at most
/// `center_jitter * global_size` per axis; every rectangle stays inside the
/// global view; each crop is resized to `crop_size^2`.
pub fn multi_scale_crops_with_rects(
    whole: &Image,
    count: usize,
    cfg: &SamplerConfig,
    rng: &mut Pcg32,
) -> Result<Vec<(Image, Rect)>> {
    if count == 0 {
        return Err(Error::invalid("crop count must be >= 1"));
    }
    cfg.validate()?;
    let g = cfg.global_size;
    let global = whole.resize_bilinear(g, g);
    let side_hi = (g / 2).max(cfg.crop_size);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let side = rng.range_usize(cfg.crop_size, side_hi + 1);
        let max_off = cfg.center_jitter * g as f32;
        let cx = g as f32 / 2.0 + rng.range_f32(-max_off, max_off);
        let cy = g as f32 / 2.0 + rng.range_f32(-max_off, max_off);
        let x0 = (cx - side as f32 / 2.0).round() as i64;
        let y0 = (cy - side as f32 / 2.0).round() as i64;
        let x0 = x0.clamp(0, (g - side) as i64);
        let y0 = y0.clamp(0, (g - side) as i64);
        let rect = Rect::new(x0, y0, side, side);
        let crop = global.crop(rect)?;
        out.push((crop.resize_bilinear(cfg.crop_size, cfg.crop_size), rect));
    }
    Ok(out)
}

pub fn multi_scale_crops(
    whole: &Image,
    count: usize,
    cfg: &SamplerConfig,
    rng: &mut Pcg32,
) -> Result<Vec<Image>> {
    Ok(multi_scale_crops_with_rects(whole, count, cfg, rng)?
        .into_iter()
        .map(|(img, _)| img)
        .collect())
}

/// Exact-cover partition of the whole into `n` rectangles, returned in
/// canonical row-major order (sorted by rectangle origin `(y, x)`), each
/// part resized to `part_size^2`.
///
/// Geometry: n = 1 is the whole; n = 2 and 3 are guillotine cuts; n = 4 and
/// other grid-decomposable counts use a jittered grid; remaining counts fall
/// back to recursive guillotine splits. Split jitter never collapses a cell
/// below one pixel, so the cover stays exact by construction.
pub fn partition_parts(
    whole: &Image,
    n: usize,
    jitter: f32,
    part_size: usize,
    rng: &mut Pcg32,
) -> Result<Vec<(Image, Rect)>> {
    if n == 0 || n > 16 {
        return Err(Error::invalid(format!("part count {n} outside 1..=16")));
    }
    if !(0.0..=0.4).contains(&jitter) {
        return Err(Error::invalid("part jitter must lie in [0, 0.4]"));
    }
    let (w, h) = (whole.width(), whole.height());
    if w < n || h < n {
        return Err(Error::invalid(format!(
            "whole {w}x{h} too small to split into {n} parts"
        )));
    }
    let full = Rect::new(0, 0, w, h);
    let mut rects = Vec::with_capacity(n);
    match n {
        1 => rects.push(full),
        2 | 3 => guillotine(full, n, jitter, rng, &mut rects),
        _ => {
            if let Some((rows, cols)) = grid_shape(n) {
                grid_partition(full, rows, cols, jitter, rng, &mut rects);
            } else {
                guillotine(full, n, jitter, rng, &mut rects);
            }
        }
    }
    rects.sort_by_key(|r| (r.y, r.x));
    rects
        .into_iter()
        .map(|r| {
            let img = whole.crop(r)?;
            Ok((img.resize_bilinear(part_size, part_size), r))
        })
        .collect()
}

/// Largest grid `rows x cols = n` with rows <= cols, if any besides `1 x n`.
fn grid_shape(n: usize) -> Option<(usize, usize)> {
    let mut best = None;
    let mut r = 2;
    while r * r <= n {
        if n % r == 0 {
            best = Some((r, n / r));
        }
        r += 1;
    }
    best
}

/// Interior split positions for `cells` cells over `len` pixels, each line
/// jittered by up to `jitter` of a cell side, kept strictly increasing.
fn split_positions(len: usize, cells: usize, jitter: f32, rng: &mut Pcg32) -> Vec<usize> {
    let cell = len as f32 / cells as f32;
    let mut cuts = Vec::with_capacity(cells - 1);
    let mut prev = 0usize;
    for i in 1..cells {
        let nominal = cell * i as f32;
        let offset = rng.range_f32(-jitter, jitter) * cell;
        let hi = len - (cells - i); // leave >= 1 px for every later cell
        let pos = ((nominal + offset).round() as usize).clamp(prev + 1, hi);
        cuts.push(pos);
        prev = pos;
    }
    cuts
}

fn grid_partition(
    rect: Rect,
    rows: usize,
    cols: usize,
    jitter: f32,
    rng: &mut Pcg32,
    out: &mut Vec<Rect>,
) {
    let xs = split_positions(rect.w, cols, jitter, rng);
    let ys = split_positions(rect.h, rows, jitter, rng);
    let mut x_edges = vec![0usize];
    x_edges.extend(&xs);
    x_edges.push(rect.w);
    let mut y_edges = vec![0usize];
    y_edges.extend(&ys);
    y_edges.push(rect.h);
    for yi in 0..rows {
        for xi in 0..cols {
            out.push(Rect::new(
                rect.x + x_edges[xi] as i64,
                rect.y + y_edges[yi] as i64,
                x_edges[xi + 1] - x_edges[xi],
                y_edges[yi + 1] - y_edges[yi],
            ));
        }
    }
}

fn guillotine(rect: Rect, n: usize, jitter: f32, rng: &mut Pcg32, out: &mut Vec<Rect>) {
    if n == 1 {
        out.push(rect);
        return;
    }
    let a = n / 2;
    let b = n - a;
    let frac = a as f32 / n as f32;
    // split the longer axis; ties split vertically
    let vertical = rect.w >= rect.h;
    let len = if vertical { rect.w } else { rect.h };
    let jit = rng.range_f32(-jitter, jitter) * frac.min(1.0 - frac);
    let cut = (((frac + jit) * len as f32).round() as usize).clamp(a.min(len - b), len - b);
    let (first, second) = if vertical {
        (
            Rect::new(rect.x, rect.y, cut, rect.h),
            Rect::new(rect.x + cut as i64, rect.y, rect.w - cut, rect.h),
        )
    } else {
        (
            Rect::new(rect.x, rect.y, rect.w, cut),
            Rect::new(rect.x, rect.y + cut as i64, rect.w, rect.h - cut),
        )
    };
    guillotine(first, a, jitter, rng, out);
    guillotine(second, b, jitter, rng, out);
}

/// Apply the augmentation family in order: brightness/contrast jitter,
/// Gaussian blur, rotation. Shape-preserving; deterministic given the RNG
/// state; degenerate configs reduce to the identity.
pub fn augment(view: &Image, config: &AugmentConfig, rng: &mut Pcg32) -> Image {
    let brightness = rng.range_f32(-config.jitter_strength, config.jitter_strength);
    let contrast = 1.0 + rng.range_f32(-config.jitter_strength, config.jitter_strength);
    let sigma = rng.range_f32(config.blur_sigma_range.0, config.blur_sigma_range.1);
    let angle = rng.range_f32(-config.rotation_range, config.rotation_range);
    view.adjust(brightness, contrast)
        .gaussian_blur(sigma)
        .rotate(angle)
}

/// Assemble a full [`AnchorSample`] for one source image: anchor whole at
/// `level`, multi-scale crops, and the part partition. The crops and parts
/// here are un-augmented; augmentation happens inside the training step.
pub fn build_anchor_sample(
    image: &Image,
    source_id: usize,
    level: u32,
    cfg: &SamplerConfig,
    rng: &mut Pcg32,
) -> Result<AnchorSample> {
    let whole = sample_anchor(image, level, rng)?;
    let crops = multi_scale_crops(&whole, cfg.crops_per_anchor, cfg, rng)?;
    let parts = partition_parts(&whole, cfg.n_parts, cfg.part_jitter, cfg.part_size, rng)?;
    Ok(AnchorSample {
        whole,
        level,
        crops,
        parts,
        source_id,
    })
}
