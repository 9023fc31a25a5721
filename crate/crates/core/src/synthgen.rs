//! Deterministic synthetic corpus of structured images with nested
//! part-whole geometry and labeled landmark coordinates.
//!
//! Every image is a "body" ellipse containing mid-level "organ" regions that
//! in turn contain small high-frequency "feature" textures. Each landmark
//! class is one feature with a class-specific texture (rings, gratings,
//! checkers, or spokes at class-specific frequency and orientation), placed
//! at a class-canonical position that is jittered per subject. The tiers sit
//! at roughly `side`, `side/2`, and `side/4` scales, so part-whole structure
//! exists at exactly the anchor scales the curriculum trains on.
//!
//! The generator is a pure function of `(spec, count)`: identical inputs
//! produce bit-identical corpora, and pixel values are snapped to the 8-bit
//! grid so a PNG round trip is exact.

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng::{stream, Pcg32};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_landmark_classes: usize,
    /// Nesting tiers: 1 = body only, 2 = body + organs, >= 3 adds features.
    pub structure_depth: usize,
    /// Pixel noise amplitude as a fraction in `[0, 1]`.
    pub noise_level: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 224,
            n_landmark_classes: 10,
            structure_depth: 3,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::invalid(format!(
                "image_size {} < 64",
                self.image_size
            )));
        }
        if self.structure_depth == 0 {
            return Err(Error::invalid("structure_depth must be >= 1"));
        }
        if self.image_size % (1 << self.structure_depth) != 0 {
            return Err(Error::invalid(format!(
                "image_size {} not divisible by 2^structure_depth = {}",
                self.image_size,
                1 << self.structure_depth
            )));
        }
        if self.n_landmark_classes < 2 {
            return Err(Error::invalid(format!(
                "n_landmark_classes {} < 2",
                self.n_landmark_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid(format!(
                "noise_level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub class_id: u32,
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Image,
    pub landmarks: Vec<Landmark>,
    pub subject_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganKind {
    Ellipse,
    Rect,
}

/// Analytic geometry of one organ region, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganGeom {
    pub kind: OrganKind,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl OrganGeom {
    /// Normalized inside metric: < 1 inside, 1 on the boundary.
    fn metric(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.kind {
            OrganKind::Ellipse => dx * dx + dy * dy,
            OrganKind::Rect => dx.abs().max(dy.abs()),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.metric(x, y) <= 1.0
    }
}

/// Scene parameters kept alongside pixels; segmentation masks and
/// classification labels for the transfer tasks are derived from these
/// rather than annotated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub subject_id: u32,
    /// Whether the bright lesion variant was rendered into the body.
    pub lesion: bool,
    pub organs: Vec<OrganGeom>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub images: Vec<LabeledImage>,
    pub scenes: Vec<SceneRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Canonical (per-corpus, not per-image) layout shared by all subjects.
struct Layout {
    organ_angles: Vec<f64>,
    organ_aspect: Vec<f64>,
    /// Per-class offset (angle, radius fraction) within its organ.
    class_offsets: Vec<(f64, f64)>,
}

fn build_layout(spec: &SceneSpec) -> Layout {
    let mut rng = Pcg32::from_coords(spec.seed, &[stream::SCENE, 0]);
    let n_organs = 4;
    let organ_angles = (0..n_organs)
        .map(|i| {
            let base = std::f64::consts::FRAC_PI_4 + i as f64 * std::f64::consts::FRAC_PI_2;
            base + rng.range_f64(-0.15, 0.15)
        })
        .collect();
    let organ_aspect = (0..n_organs).map(|_| rng.range_f64(0.75, 1.3)).collect();
    let class_offsets = (0..spec.n_landmark_classes)
        .map(|_| {
            (
                rng.range_f64(0.0, std::f64::consts::TAU),
                rng.range_f64(0.15, 0.55),
            )
        })
        .collect();
    Layout {
        organ_angles,
        organ_aspect,
        class_offsets,
    }
}

/// Class-specific texture in local coordinates `u, v` normalized to the
/// feature disk, with a small per-subject phase. Returns a value in
/// `[-1, 1]`. Class identity lives in the pattern family, orientation, and
/// frequency; the phase only adds subject diversity.
fn class_pattern(class_id: usize, u: f64, v: f64, phase: f64) -> f64 {
    let theta = class_id as f64 * 2.399963229728653; // golden angle
    let freq = std::f64::consts::PI * (3.0 + (class_id % 5) as f64);
    match class_id % 4 {
        0 => (freq * (u * u + v * v).sqrt() + phase).cos(),
        1 => (freq * (u * theta.cos() + v * theta.sin()) + phase).sin(),
        2 => {
            let a = (freq * 0.7 * (u * theta.cos() + v * theta.sin()) + phase).sin();
            let b = (freq * 0.7 * (-u * theta.sin() + v * theta.cos())).sin();
            a * b
        }
        _ => {
            let spokes = 3.0 + 2.0 * (class_id % 4) as f64;
            (spokes * v.atan2(u) + theta + phase).sin()
        }
    }
}

fn smooth_cov(metric: f64, edge: f64) -> f64 {
    // coverage 1 well inside (metric << 1), 0 outside, smooth over `edge`
    let t = ((1.0 - metric) / edge + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generate `count` labeled images, deterministically from `(spec, count)`.
pub fn generate_corpus(spec: &SceneSpec, count: usize) -> Result<Corpus> {
    spec.validate()?;
    if count < 1 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let layout = build_layout(spec);
    let mut images = Vec::with_capacity(count);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let (img, scene) = generate_one(spec, &layout, i as u32);
        images.push(img);
        scenes.push(scene);
    }
    Ok(Corpus {
        spec: *spec,
        images,
        scenes,
    })
}

fn generate_one(spec: &SceneSpec, layout: &Layout, subject_id: u32) -> (LabeledImage, SceneRecord) {
    let s = spec.image_size as f64;
    let mut rng = Pcg32::from_coords(spec.seed, &[stream::SCENE, 1, subject_id as u64]);

    // body ellipse, jittered per subject
    let body_cx = s / 2.0 + rng.range_f64(-0.02, 0.02) * s;
    let body_cy = s / 2.0 + rng.range_f64(-0.02, 0.02) * s;
    let body_rx = 0.42 * s * rng.range_f64(0.95, 1.05);
    let body_ry = 0.35 * s * rng.range_f64(0.95, 1.05);

    // per-subject appearance signature: shade offsets, texture amplitude,
    // pattern phases, and a background gradient direction — subjects stay
    // identifiable at every scale, not just by local geometry
    let body_shade = 0.32 + rng.range_f64(-0.06, 0.06);
    let organ_shade_jitter: Vec<f64> = (0..4).map(|_| rng.range_f64(-0.08, 0.08)).collect();
    let tex_amp = 0.30 + rng.range_f64(-0.05, 0.05);
    let phases: Vec<f64> = (0..spec.n_landmark_classes)
        .map(|_| rng.range_f64(-0.5, 0.5))
        .collect();
    let bg_angle = rng.range_f64(0.0, std::f64::consts::TAU);
    let bg_amp = rng.range_f64(0.0, 0.05);

    // organs at canonical angles around the body center (tier 2, ~s/2 scale)
    let with_organs = spec.structure_depth >= 2;
    let mut organs = Vec::new();
    if with_organs {
        for (slot, (&angle, &aspect)) in layout
            .organ_angles
            .iter()
            .zip(layout.organ_aspect.iter())
            .enumerate()
        {
            let orbit = 0.20 * s;
            let cx = body_cx + orbit * angle.cos() * 1.15 + rng.range_f64(-0.02, 0.02) * s;
            let cy = body_cy + orbit * angle.sin() * 0.85 + rng.range_f64(-0.02, 0.02) * s;
            let size = 0.13 * s * rng.range_f64(0.92, 1.08);
            organs.push(OrganGeom {
                kind: if slot % 2 == 0 {
                    OrganKind::Ellipse
                } else {
                    OrganKind::Rect
                },
                cx,
                cy,
                rx: size * aspect,
                ry: size / aspect,
            });
        }
    }

    // features carry the landmarks (tier 3, ~s/4 scale); with no organ tier
    // they hang off the body directly
    let feature_r = 0.08 * s;
    let mut landmarks = Vec::with_capacity(spec.n_landmark_classes);
    let mut features = Vec::with_capacity(spec.n_landmark_classes);
    for class in 0..spec.n_landmark_classes {
        let (off_angle, off_frac) = layout.class_offsets[class];
        let (host_cx, host_cy, host_rx, host_ry) = if with_organs {
            let o = &organs[class % organs.len()];
            (o.cx, o.cy, o.rx, o.ry)
        } else {
            (body_cx, body_cy, body_rx * 0.7, body_ry * 0.7)
        };
        let fx = host_cx + off_frac * host_rx * off_angle.cos() + rng.range_f64(-0.015, 0.015) * s;
        let fy = host_cy + off_frac * host_ry * off_angle.sin() + rng.range_f64(-0.015, 0.015) * s;
        // strictly inside the image with margin
        let fx = fx.clamp(feature_r + 1.0, s - feature_r - 2.0);
        let fy = fy.clamp(feature_r + 1.0, s - feature_r - 2.0);
        features.push((class, fx, fy));
        landmarks.push(Landmark {
            class_id: class as u32,
            x: fx as f32,
            y: fy as f32,
        });
    }

    // lesion variant: a bright blob somewhere in the body, present for half
    // the subjects; drives the classification transfer task
    let lesion = rng.uniform_f32() < 0.5;
    let lesion_angle = rng.range_f64(0.0, std::f64::consts::TAU);
    let lesion_rad = rng.range_f64(0.0, 0.22) * s;
    let (les_x, les_y) = (
        body_cx + lesion_rad * lesion_angle.cos(),
        body_cy + lesion_rad * lesion_angle.sin(),
    );
    let les_sigma = 0.035 * s * rng.range_f64(0.85, 1.15);

    let edge = 3.0 / s; // soft edges a couple of pixels wide
    let n = spec.image_size;
    let mut img = Image::zeros(n, n, 1);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let g = (xf - s / 2.0) * bg_angle.cos() + (yf - s / 2.0) * bg_angle.sin();
            let mut v = 0.10 + bg_amp * g / s;

            let body_m = {
                let dx = (xf - body_cx) / body_rx;
                let dy = (yf - body_cy) / body_ry;
                dx * dx + dy * dy
            };
            let cov = smooth_cov(body_m, edge * 6.0);
            v = v + (body_shade - v) * cov;

            for (slot, o) in organs.iter().enumerate() {
                let cov = smooth_cov(o.metric(xf, yf), edge * 12.0);
                let shade = 0.48 + 0.04 * (slot % 3) as f64 + organ_shade_jitter[slot];
                v = v + (shade - v) * cov;
            }

            for &(class, fx, fy) in &features {
                let du = (xf - fx) / feature_r;
                let dv = (yf - fy) / feature_r;
                let m = du * du + dv * dv;
                if m < 1.5 {
                    let cov = smooth_cov(m, edge * 20.0);
                    let tex = 0.62 + tex_amp * class_pattern(class, du, dv, phases[class]);
                    v = v + (tex - v) * cov;
                }
            }

            if lesion {
                let d2 = (xf - les_x) * (xf - les_x) + (yf - les_y) * (yf - les_y);
                v += 0.30 * (-d2 / (2.0 * les_sigma * les_sigma)).exp();
            }

            img.set(x, y, 0, v as f32);
        }
    }

    if spec.noise_level > 0.0 {
        let sigma = 0.1 * spec.noise_level;
        for v in img.data_mut() {
            *v += sigma * rng.normal_f32();
        }
    }
    img.clamp_unit();
    img.quantize_u8();

    (
        LabeledImage {
            pixels: img,
            landmarks,
            subject_id,
        },
        SceneRecord {
            subject_id,
            lesion,
            organs,
        },
    )
}

/// Binary mask of the organ regions, rendered analytically from the scene
/// record. Ground truth for the segmentation transfer task.
pub fn organ_mask(scene: &SceneRecord, image_size: usize) -> Image {
    Image::from_fn(image_size, image_size, 1, |x, y, _| {
        let inside = scene
            .organs
            .iter()
            .any(|o| o.contains(x as f64, y as f64));
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// A patch cut by [`render_patch`], with its padding accounted for.
#[derive(Debug, Clone)]
pub struct RenderedPatch {
    pub pixels: Image,
    pub pad_left: usize,
    pub pad_right: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    /// Padding policy applied outside the source bounds.
    pub policy: PadPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    Replicate,
}

/// `size x size` sub-image centered at `center` (rounded to the nearest
/// pixel), edge-replicated where the window leaves the image.
pub fn render_patch(image: &Image, center: (f32, f32), size: usize) -> Result<RenderedPatch> {
    if size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let cx = center.0.round() as i64;
    let cy = center.1.round() as i64;
    let half = size as i64 / 2;
    let x0 = cx - half;
    let y0 = cy - half;
    let (w, h) = (image.width() as i64, image.height() as i64);
    // the window must overlap the image somewhere
    if x0 >= w || y0 >= h || x0 + size as i64 <= 0 || y0 + size as i64 <= 0 {
        return Err(Error::invalid(format!(
            "patch at ({cx},{cy}) size {size} does not intersect {w}x{h} image"
        )));
    }
    let pixels = image.window_replicated(Rect::new(x0, y0, size, size));
    Ok(RenderedPatch {
        pixels,
        pad_left: (-x0).max(0) as usize,
        pad_right: (x0 + size as i64 - w).max(0) as usize,
        pad_top: (-y0).max(0) as usize,
        pad_bottom: (y0 + size as i64 - h).max(0) as usize,
        policy: PadPolicy::Replicate,
    })
}

// ---------------------------------------------------------------------------
// corpus persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub subject_id: u32,
    pub lesion: bool,
    pub landmarks: Vec<Landmark>,
    pub organs: Vec<OrganGeom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema: u32,
    pub spec: SceneSpec,
    pub images: Vec<ManifestEntry>,
}

/// Write one PNG per image plus `manifest.json`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (img, scene) in corpus.images.iter().zip(corpus.scenes.iter()) {
        let file = format!("img_{:05}.png", img.subject_id);
        img.pixels.save_png(&dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            subject_id: img.subject_id,
            lesion: scene.lesion,
            landmarks: img.landmarks.clone(),
            organs: scene.organs.clone(),
        });
    }
    let manifest = CorpusManifest {
        schema: crate::SCHEMA_VERSION,
        spec: corpus.spec,
        images: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a corpus previously written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::CorruptFile {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes)?;
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut scenes = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let pixels = Image::load_png(&dir.join(&entry.file))?;
        images.push(LabeledImage {
            pixels,
            landmarks: entry.landmarks.clone(),
            subject_id: entry.subject_id,
        });
        scenes.push(SceneRecord {
            subject_id: entry.subject_id,
            lesion: entry.lesion,
            organs: entry.organs.clone(),
        });
    }
    Ok(Corpus {
        spec: manifest.spec,
        images,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> SceneSpec {
        SceneSpec {
            image_size: 64,
            n_landmark_classes: 10,
            structure_depth: 3,
            noise_level: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let spec = desk_spec();
        let a = generate_corpus(&spec, 3).unwrap();
        let b = generate_corpus(&spec, 3).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.landmarks, y.landmarks);
        }
    }

    #[test]
    fn every_class_appears_exactly_once_per_image() {
        let spec = SceneSpec {
            n_landmark_classes: 10,
            ..desk_spec()
        };
        let corpus = generate_corpus(&spec, 20).unwrap();
        for img in &corpus.images {
            assert_eq!(img.landmarks.len(), 10);
            let mut seen = vec![0u32; 10];
            for lm in &img.landmarks {
                seen[lm.class_id as usize] += 1;
                assert!(lm.x > 0.0 && lm.x < spec.image_size as f32);
                assert!(lm.y > 0.0 && lm.y < spec.image_size as f32);
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn landmark_jitter_stays_below_ten_percent() {
        let spec = SceneSpec {
            noise_level: 0.0,
            ..desk_spec()
        };
        let corpus = generate_corpus(&spec, 2).unwrap();
        let bound = 0.10 * spec.image_size as f32;
        for (a, b) in corpus.images[0]
            .landmarks
            .iter()
            .zip(corpus.images[1].landmarks.iter())
        {
            assert_eq!(a.class_id, b.class_id);
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            assert!(d < bound, "class {} displaced by {d}", a.class_id);
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad_size = SceneSpec {
            image_size: 32,
            ..desk_spec()
        };
        let err = generate_corpus(&bad_size, 1).unwrap_err().to_string();
        assert!(err.contains("image_size"));

        let bad_div = SceneSpec {
            image_size: 100,
            ..desk_spec()
        };
        assert!(generate_corpus(&bad_div, 1)
            .unwrap_err()
            .to_string()
            .contains("structure_depth"));

        let bad_classes = SceneSpec {
            n_landmark_classes: 1,
            ..desk_spec()
        };
        assert!(generate_corpus(&bad_classes, 1)
            .unwrap_err()
            .to_string()
            .contains("n_landmark_classes"));

        let bad_noise = SceneSpec {
            noise_level: 1.5,
            ..desk_spec()
        };
        assert!(generate_corpus(&bad_noise, 1)
            .unwrap_err()
            .to_string()
            .contains("noise_level"));

        assert!(generate_corpus(&desk_spec(), 0).is_err());
    }

    #[test]
    fn render_patch_whole_image_identity() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 1).unwrap();
        let img = &corpus.images[0].pixels;
        let half = (spec.image_size / 2) as f32;
        let patch = render_patch(img, (half, half), spec.image_size).unwrap();
        assert_eq!(&patch.pixels, img);
        assert_eq!(
            patch.pad_left + patch.pad_right + patch.pad_top + patch.pad_bottom,
            0
        );
    }

    #[test]
    fn render_patch_center_pixel_matches_source() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 1).unwrap();
        let img = &corpus.images[0].pixels;
        let lm = &corpus.images[0].landmarks[3];
        let size = 24;
        let patch = render_patch(img, (lm.x, lm.y), size).unwrap();
        let center = patch.pixels.get(size / 2, size / 2, 0);
        let src = img.get(lm.x.round() as usize, lm.y.round() as usize, 0);
        assert_eq!(center, src);
    }

    #[test]
    fn render_patch_corner_pads_two_sides() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 1).unwrap();
        let img = &corpus.images[0].pixels;
        let patch = render_patch(img, (0.0, 0.0), 96).unwrap();
        assert_eq!(patch.pad_left, 48);
        assert_eq!(patch.pad_top, 48);
        assert_eq!(patch.pad_right, 0);
        assert_eq!(patch.pad_bottom, 0);
        assert_eq!(patch.policy, PadPolicy::Replicate);
        // brute-force reference windowing: count positions outside the source
        let mut padded = 0u32;
        for y in -48i64..48 {
            for x in -48i64..48 {
                if x < 0 || y < 0 || x >= 64 || y >= 64 {
                    padded += 1;
                }
            }
        }
        let interior = (96 - patch.pad_left) * (96 - patch.pad_top);
        assert_eq!(96 * 96 - interior as u32, padded);
        // padded pixels replicate the nearest edge pixel
        assert_eq!(patch.pixels.get(0, 0, 0), img.get(0, 0, 0));
        assert_eq!(patch.pixels.get(47, 10, 0), img.get(0, 0, 0));
    }

    #[test]
    fn render_patch_rejects_degenerate_requests() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 1).unwrap();
        let img = &corpus.images[0].pixels;
        assert!(render_patch(img, (32.0, 32.0), 0).is_err());
        assert!(render_patch(img, (500.0, 500.0), 8).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 4).unwrap();
        let dir = std::env::temp_dir().join("holon_synthgen_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        save_corpus(&corpus, &dir).unwrap();
        let back = load_corpus(&dir).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in corpus.images.iter().zip(back.images.iter()) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.subject_id, b.subject_id);
        }
        for (a, b) in corpus.scenes.iter().zip(back.scenes.iter()) {
            assert_eq!(a.lesion, b.lesion);
            assert_eq!(a.organs, b.organs);
        }
    }

    #[test]
    fn organ_mask_nonempty_and_binary() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 2).unwrap();
        let mask = organ_mask(&corpus.scenes[0], spec.image_size);
        let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(ones + zeros, 64 * 64);
        let frac = ones as f64 / (64.0 * 64.0);
        assert!(frac > 0.05 && frac < 0.6, "organ fraction {frac}");
    }

    #[test]
    fn lesion_labels_roughly_balanced() {
        let spec = desk_spec();
        let corpus = generate_corpus(&spec, 100).unwrap();
        let positives = corpus.scenes.iter().filter(|s| s.lesion).count();
        assert!((30..=70).contains(&positives), "positives {positives}");
    }

    /// Same-class landmark patches must correlate more strongly with each
    /// other than with other classes' patches, averaged over the corpus —
    /// the property that makes the corpus a meaningful clustering testbed.
    #[test]
    fn same_class_patches_correlate_highest() {
        let spec = SceneSpec {
            image_size: 128,
            noise_level: 0.02,
            ..desk_spec()
        };
        let corpus = generate_corpus(&spec, 6).unwrap();
        let patch_size = 48;
        let mut patches: Vec<(usize, Vec<f32>)> = Vec::new();
        for img in &corpus.images {
            for lm in &img.landmarks {
                let p = render_patch(&img.pixels, (lm.x, lm.y), patch_size).unwrap();
                patches.push((lm.class_id as usize, p.pixels.data().to_vec()));
            }
        }
        let pearson = |a: &[f32], b: &[f32]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mut num = 0.0;
            let mut da = 0.0;
            let mut db = 0.0;
            for (&x, &y) in a.iter().zip(b.iter()) {
                num += (x as f64 - ma) * (y as f64 - mb);
                da += (x as f64 - ma).powi(2);
                db += (y as f64 - mb).powi(2);
            }
            num / (da.sqrt() * db.sqrt()).max(1e-12)
        };
        let mut same = (0.0, 0u32);
        let mut diff = (0.0, 0u32);
        for i in 0..patches.len() {
            for j in (i + 1)..patches.len() {
                let r = pearson(&patches[i].1, &patches[j].1);
                if patches[i].0 == patches[j].0 {
                    same = (same.0 + r, same.1 + 1);
                } else {
                    diff = (diff.0 + r, diff.1 + 1);
                }
            }
        }
        let mean_same = same.0 / same.1 as f64;
        let mean_diff = diff.0 / diff.1 as f64;
        assert!(
            mean_same > mean_diff + 0.1,
            "same-class corr {mean_same} vs cross-class {mean_diff}"
        );
    }
}
