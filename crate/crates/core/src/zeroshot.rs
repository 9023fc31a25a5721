//! Zero-shot analyses over frozen embeddings: landmark clustering quality,
//! part-whole composition similarity, embedding interpolation/extrapolation
//! fidelity, and sliding-window landmark matching.
//!
//! All analyses run the frozen *teacher* encoder. Results are deterministic
//! given `(parameters, corpus, seed)`: trials derive their RNG streams from
//! their indices and are aggregated in index order.

use crate::data::partition_parts;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses;
use crate::model::{Model, ModelState};
use crate::rng::{stream, Pcg32};
use crate::stats::{cosine_similarity, euclidean, l2_normalize, Summary};
use crate::synthgen::{render_patch, Corpus, LabeledImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One frozen embedding extracted around a landmark.
#[derive(Debug, Clone)]
pub struct LandmarkEmbedding {
    pub class_id: u32,
    pub subject_id: u32,
    pub level: u32,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkEmbeddingSet {
    pub entries: Vec<LandmarkEmbedding>,
}

/// Embed a patch around every landmark of every corpus image, at every
/// requested level. Level `l` uses a patch of side `patch_size / 2^(l-1)`
/// resized to the encoder input, so higher levels see tighter context.
pub fn extract_landmark_embeddings(
    model: &Model,
    state: &ModelState,
    corpus: &Corpus,
    patch_size: usize,
    levels: &[u32],
) -> Result<LandmarkEmbeddingSet> {
    if levels.is_empty() || levels.iter().any(|&l| l == 0) {
        return Err(Error::invalid("levels must be non-empty and start at 1"));
    }
    for img in &corpus.images {
        if img.landmarks.is_empty() {
            return Err(Error::invalid(format!(
                "image {} has no landmark ground truth",
                img.subject_id
            )));
        }
    }
    let input = model.config.encoder.input_size;
    let mut tasks = Vec::new();
    for (idx, img) in corpus.images.iter().enumerate() {
        for lm in &img.landmarks {
            for &level in levels {
                tasks.push((idx, lm.class_id, img.subject_id, level, lm.x, lm.y));
            }
        }
    }
    let entries: Vec<Result<LandmarkEmbedding>> = tasks
        .par_iter()
        .map(|&(idx, class_id, subject_id, level, x, y)| {
            let side = (patch_size >> (level - 1)).max(2);
            let patch = render_patch(&corpus.images[idx].pixels, (x, y), side)?;
            let view = patch.pixels.resize_bilinear(input, input);
            let embedding = model.encode(&state.teacher, &view)?;
            Ok(LandmarkEmbedding {
                class_id,
                subject_id,
                level,
                embedding,
            })
        })
        .collect();
    let entries: Result<Vec<_>> = entries.into_iter().collect();
    Ok(LandmarkEmbeddingSet { entries: entries? })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDistanceStats {
    pub class_id: u32,
    pub summary: Summary,
    /// Raw pairwise distances, kept for plotting.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntraClusterReport {
    pub schema: u32,
    /// Per-class summary of pairwise intra-class Euclidean distances.
    pub per_class: Vec<ClassDistanceStats>,
    pub silhouette: f64,
    /// Set when all pairwise distances vanish (silhouette undefined).
    pub degenerate: bool,
    /// Whether embeddings were L2-normalized before distances; on by
    /// default so checkpoints with different embedding scales compare
    /// meaningfully.
    pub normalized: bool,
    /// Mean distance between same-landmark embeddings at consecutive level
    /// pairs `(a, b)`, when multiple levels were extracted.
    pub cross_level: Vec<CrossLevelStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossLevelStat {
    pub level_a: u32,
    pub level_b: u32,
    pub mean_distance: f64,
}

/// Per-class pairwise distance statistics plus a silhouette score over all
/// entries. Errors on any class with fewer than two entries.
pub fn intra_cluster_stats(
    set: &LandmarkEmbeddingSet,
    normalize: bool,
) -> Result<IntraClusterReport> {
    if set.entries.is_empty() {
        return Err(Error::invalid("empty embedding set"));
    }
    let dim = set.entries[0].embedding.len();
    if set.entries.iter().any(|e| e.embedding.len() != dim) {
        return Err(Error::shape("embeddings differ in length"));
    }
    let embs: Vec<Vec<f32>> = set
        .entries
        .iter()
        .map(|e| {
            if normalize {
                l2_normalize(&e.embedding)
            } else {
                e.embedding.clone()
            }
        })
        .collect();
    let labels: Vec<u32> = set.entries.iter().map(|e| e.class_id).collect();

    let mut classes: Vec<u32> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "class {c} has a single entry; need >= 2 for distance statistics"
            )));
        }
        let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
        for i in 0..idx.len() {
            for j in (i + 1)..idx.len() {
                dists.push(euclidean(&embs[idx[i]], &embs[idx[j]]));
            }
        }
        per_class.push(ClassDistanceStats {
            class_id: c,
            summary: Summary::from_values(&dists),
            values: dists,
        });
    }
    let sil = crate::stats::silhouette(&labels, &embs)?;

    // harmony across scales: same landmark instance at adjacent levels
    let mut levels: Vec<u32> = set.entries.iter().map(|e| e.level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut cross_level = Vec::new();
    for w in levels.windows(2) {
        let (la, lb) = (w[0], w[1]);
        let mut dists = Vec::new();
        for ea in set.entries.iter().filter(|e| e.level == la) {
            if let Some(eb) = set.entries.iter().find(|e| {
                e.level == lb && e.class_id == ea.class_id && e.subject_id == ea.subject_id
            }) {
                let (x, y) = if normalize {
                    (l2_normalize(&ea.embedding), l2_normalize(&eb.embedding))
                } else {
                    (ea.embedding.clone(), eb.embedding.clone())
                };
                dists.push(euclidean(&x, &y));
            }
        }
        if !dists.is_empty() {
            cross_level.push(CrossLevelStat {
                level_a: la,
                level_b: lb,
                mean_distance: crate::stats::mean(&dists),
            });
        }
    }

    Ok(IntraClusterReport {
        schema: crate::SCHEMA_VERSION,
        per_class,
        silhouette: sil.score,
        degenerate: sil.degenerate,
        normalized: normalize,
        cross_level,
    })
}

/// A labeled batch of similarity values plus its summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub grouping: String,
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl SimilarityDistribution {
    pub fn new(grouping: impl Into<String>, values: Vec<f64>) -> Self {
        let summary = Summary::from_values(&values);
        SimilarityDistribution {
            grouping: grouping.into(),
            values,
            summary,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComposeReport {
    pub schema: u32,
    pub trials: usize,
    pub groups: Vec<SimilarityDistribution>,
}

/// Cosine similarity between a random whole's embedding and the aggregate of
/// its `k` parts, for each `k` in `parts_options`, over `trials` random
/// wholes per option.
///
/// The whole is embedded by the teacher encoder; parts are embedded by the
/// teacher encoder and aggregated through the (student-trained)
/// composability head. For `k` below the head's slot count `n`, part
/// features fill the `n` canonical slots by index repetition
/// (`slot i <- part floor(i * k / n)`), preserving canonical ordering.
pub fn composition_similarity(
    model: &Model,
    state: &ModelState,
    corpus: &Corpus,
    parts_options: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ComposeReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    let n = model.n_parts();
    for &k in parts_options {
        if k == 0 || k > n {
            return Err(Error::invalid(format!(
                "parts option {k} outside 1..={n} supported by the composability head"
            )));
        }
    }
    let input = model.config.encoder.input_size;
    let mut groups = Vec::with_capacity(parts_options.len());
    for &k in parts_options {
        let values: Vec<Result<f64>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng =
                    Pcg32::from_coords(seed, &[stream::EVAL, 1, k as u64, trial as u64]);
                let img = &corpus.images[rng.below(corpus.len())].pixels;
                let side_lo = (img.width() / 2).max(8);
                let side = rng.range_usize(side_lo, img.width() + 1);
                let x = rng.range_usize(0, img.width() - side + 1);
                let y = rng.range_usize(0, img.height() - side + 1);
                let whole = img.crop(crate::image::Rect::new(x as i64, y as i64, side, side))?;
                let parts = partition_parts(&whole, k, 0.25, input, &mut rng)?;
                let whole_view = whole.resize_bilinear(input, input);
                let e_whole = model.encode(&state.teacher, &whole_view)?;
                let mut feats = Vec::with_capacity(k);
                for (part, _) in &parts {
                    feats.push(model.encode(&state.teacher, part)?);
                }
                let slots: Vec<Vec<f32>> = (0..n).map(|i| feats[i * k / n].clone()).collect();
                let aggregated = model.compose(&state.student, &slots)?;
                Ok(cosine_similarity(&e_whole, &aggregated))
            })
            .collect();
        let values: Result<Vec<f64>> = values.into_iter().collect();
        let values = values?;
        if values.iter().any(|v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(Error::NonFinite("cosine similarity outside [-1, 1]".into()));
        }
        groups.push(SimilarityDistribution::new(format!("parts={k}"), values));
    }
    Ok(ComposeReport {
        schema: crate::SCHEMA_VERSION,
        trials,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    Interpolation,
    Extrapolation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpReport {
    pub schema: u32,
    pub trials: usize,
    pub patch_size: usize,
    pub groups: Vec<SimilarityDistribution>,
}

/// Linear interpolation with exact endpoints: `t = 0` returns `a` bitwise,
/// `t = 1` returns `b` bitwise.
fn lerp(a: f32, b: f32, t: f64) -> f32 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        (a as f64 + t * (b as f64 - a as f64)) as f32
    }
}

fn lerp_vec(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    a.iter().zip(b.iter()).map(|(&x, &y)| lerp(x, y, t)).collect()
}

/// For random point pairs `(A, B)`: predict the embedding at
/// `C = A + t (B - A)` as `E'_C = E_A + t (E_B - E_A)` (interpolation) and
/// at `D = B + t (B - A)`, clamped inside bounds, as
/// `E'_D = E_B + t (E_B - E_A)` (extrapolation); record the cosine between
/// each prediction and the embedding of the actual patch.
pub fn interpolate_extrapolate(
    model: &Model,
    state: &ModelState,
    corpus: &Corpus,
    t_values: &[f64],
    trials: usize,
    patch_size: usize,
    seed: u64,
) -> Result<InterpReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    for &t in t_values {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t value {t} outside [0, 1]")));
        }
    }
    let input = model.config.encoder.input_size;
    let embed_at = |x: f32, y: f32, img: &Image| -> Result<Vec<f32>> {
        let patch = render_patch(img, (x, y), patch_size)?;
        let view = patch.pixels.resize_bilinear(input, input);
        model.encode(&state.teacher, &view)
    };

    let mut groups = Vec::new();
    for &t in t_values {
        for mode in [InterpMode::Interpolation, InterpMode::Extrapolation] {
            let values: Vec<Result<f64>> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mode_tag = match mode {
                        InterpMode::Interpolation => 0u64,
                        InterpMode::Extrapolation => 1u64,
                    };
                    let mut rng = Pcg32::from_coords(
                        seed,
                        &[stream::EVAL, 2, mode_tag, t.to_bits(), trial as u64],
                    );
                    let img = &corpus.images[rng.below(corpus.len())].pixels;
                    let (w, h) = (img.width() as f32, img.height() as f32);
                    // points stay a margin inside so patches remain informative
                    let margin = (patch_size as f32 / 4.0).min(w / 4.0);
                    let min_sep = patch_size as f32 / 2.0;
                    let mut a = (0.0f32, 0.0f32);
                    let mut b = (0.0f32, 0.0f32);
                    for attempt in 0..128 {
                        a = (
                            rng.range_f32(margin, w - margin).round(),
                            rng.range_f32(margin, h - margin).round(),
                        );
                        b = (
                            rng.range_f32(margin, w - margin).round(),
                            rng.range_f32(margin, h - margin).round(),
                        );
                        let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                        if d >= min_sep || attempt == 127 {
                            break;
                        }
                    }
                    let e_a = embed_at(a.0, a.1, img)?;
                    let e_b = embed_at(b.0, b.1, img)?;
                    match mode {
                        InterpMode::Interpolation => {
                            let c = (lerp(a.0, b.0, t), lerp(a.1, b.1, t));
                            let truth = embed_at(c.0, c.1, img)?;
                            let predicted = lerp_vec(&e_a, &e_b, t);
                            Ok(cosine_similarity(&predicted, &truth))
                        }
                        InterpMode::Extrapolation => {
                            let dx = b.0 - a.0;
                            let dy = b.1 - a.1;
                            let d = (
                                (b.0 + t as f32 * dx).clamp(0.0, w - 1.0),
                                (b.1 + t as f32 * dy).clamp(0.0, h - 1.0),
                            );
                            let truth = embed_at(d.0, d.1, img)?;
                            // E'_D = E_B + t (E_B - E_A); exact at t = 0
                            let predicted: Vec<f32> = e_a
                                .iter()
                                .zip(e_b.iter())
                                .map(|(&ea, &eb)| {
                                    if t == 0.0 {
                                        eb
                                    } else {
                                        (eb as f64 + t * (eb as f64 - ea as f64)) as f32
                                    }
                                })
                                .collect();
                            Ok(cosine_similarity(&predicted, &truth))
                        }
                    }
                })
                .collect();
            let values: Result<Vec<f64>> = values.into_iter().collect();
            let label = match mode {
                InterpMode::Interpolation => format!("interp_t={t}"),
                InterpMode::Extrapolation => format!("extrap_t={t}"),
            };
            groups.push(SimilarityDistribution::new(label, values?));
        }
    }
    Ok(InterpReport {
        schema: crate::SCHEMA_VERSION,
        trials,
        patch_size,
        groups,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkMatch {
    pub class_id: u32,
    pub query_x: f32,
    pub query_y: f32,
    pub matched_x: f32,
    pub matched_y: f32,
    pub l2_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchReport {
    pub schema: u32,
    pub window: usize,
    pub stride: usize,
    pub matches: Vec<LandmarkMatch>,
}

/// Slide a `window^2` patch over the key image with the given stride, embed
/// every position, and match each query point to the window center whose
/// embedding minimizes the L2 distance. Ties break toward the smallest
/// `(y, x)` window origin.
pub fn match_landmarks(
    model: &Model,
    state: &ModelState,
    query: &LabeledImage,
    key: &Image,
    query_points: Option<&[(u32, f32, f32)]>,
    window: usize,
    stride: usize,
) -> Result<Vec<LandmarkMatch>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if window > key.width() || window > key.height() {
        return Err(Error::invalid(format!(
            "window {window} exceeds key image side {}",
            key.width().min(key.height())
        )));
    }
    let points: Vec<(u32, f32, f32)> = match query_points {
        Some(ps) => ps.to_vec(),
        None => {
            if query.landmarks.is_empty() {
                return Err(Error::invalid("query image has no landmark ground truth"));
            }
            query
                .landmarks
                .iter()
                .map(|lm| (lm.class_id, lm.x, lm.y))
                .collect()
        }
    };
    let input = model.config.encoder.input_size;

    // key window grid, row-major
    let mut origins = Vec::new();
    let mut oy = 0usize;
    while oy + window <= key.height() {
        let mut ox = 0usize;
        while ox + window <= key.width() {
            origins.push((ox, oy));
            ox += stride;
        }
        oy += stride;
    }
    let key_embeddings: Vec<Result<Vec<f32>>> = origins
        .par_iter()
        .map(|&(ox, oy)| {
            let patch =
                key.crop(crate::image::Rect::new(ox as i64, oy as i64, window, window))?;
            let view = patch.resize_bilinear(input, input);
            model.encode(&state.teacher, &view)
        })
        .collect();
    let key_embeddings: Result<Vec<Vec<f32>>> = key_embeddings.into_iter().collect();
    let key_embeddings = key_embeddings?;

    let mut out = Vec::with_capacity(points.len());
    for &(class_id, qx, qy) in &points {
        let patch = render_patch(&query.pixels, (qx, qy), window)?;
        let view = patch.pixels.resize_bilinear(input, input);
        let q_emb = model.encode(&state.teacher, &view)?;
        let mut best = (f64::INFINITY, 0usize);
        for (i, k_emb) in key_embeddings.iter().enumerate() {
            let d = euclidean(&q_emb, k_emb);
            if d < best.0 {
                best = (d, i);
            }
        }
        let (ox, oy) = origins[best.1];
        out.push(LandmarkMatch {
            class_id,
            query_x: qx,
            query_y: qy,
            matched_x: (ox + window / 2) as f32,
            matched_y: (oy + window / 2) as f32,
            l2_distance: best.0,
        });
    }
    Ok(out)
}

/// Fraction of matches whose matched point lies within `tolerance` pixels of
/// the key image's same-class landmark. `None` when the key carries no
/// ground truth for any matched class.
pub fn match_accuracy(
    matches: &[LandmarkMatch],
    key: &LabeledImage,
    tolerance: f64,
) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for m in matches {
        if let Some(lm) = key.landmarks.iter().find(|l| l.class_id == m.class_id) {
            total += 1;
            let d = (((m.matched_x - lm.x) as f64).powi(2)
                + ((m.matched_y - lm.y) as f64).powi(2))
            .sqrt();
            if d <= tolerance {
                hits += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(hits as f64 / total as f64)
    }
}

// ---------------------------------------------------------------------------
// 2-D projection plumbing (inspection only, no acceptance semantics)
// ---------------------------------------------------------------------------

/// Dimensionality reducer for the inspection scatter plots.
pub trait Reducer {
    fn name(&self) -> &'static str;
    fn reduce(&self, data: &[Vec<f32>]) -> Vec<[f64; 2]>;
}

/// Top-2 principal components via deterministic power iteration.
pub struct PcaReducer {
    pub iterations: usize,
}

impl Default for PcaReducer {
    fn default() -> Self {
        PcaReducer { iterations: 128 }
    }
}

impl Reducer for PcaReducer {
    fn name(&self) -> &'static str {
        "pca"
    }

    fn reduce(&self, data: &[Vec<f32>]) -> Vec<[f64; 2]> {
        if data.is_empty() {
            return Vec::new();
        }
        let n = data.len();
        let d = data[0].len();
        let mut mean = vec![0.0f64; d];
        for row in data {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v as f64 / n as f64;
            }
        }
        let centered: Vec<Vec<f64>> = data
            .iter()
            .map(|row| row.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
            .collect();
        let mut cov = vec![0.0f64; d * d];
        for row in &centered {
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
        let mut work = cov;
        for _ in 0..2 {
            let mut v = vec![1.0f64 / (d as f64).sqrt(); d];
            for _ in 0..self.iterations {
                let mut next = vec![0.0f64; d];
                for i in 0..d {
                    let row = &work[i * d..(i + 1) * d];
                    next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                }
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
                for x in &mut next {
                    *x /= norm;
                }
                v = next;
            }
            let lambda: f64 = {
                let mut cv = vec![0.0f64; d];
                for i in 0..d {
                    cv[i] = work[i * d..(i + 1) * d]
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| a * b)
                        .sum();
                }
                cv.iter().zip(&v).map(|(a, b)| a * b).sum()
            };
            for i in 0..d {
                for j in 0..d {
                    work[i * d + j] -= lambda * v[i] * v[j];
                }
            }
            components.push(v);
        }
        centered
            .iter()
            .map(|row| {
                [
                    row.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
                    row.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
                ]
            })
            .collect()
    }
}

/// Mean teacher-distribution entropy over whole-image views; the same
/// collapse indicator the trainer logs, exposed for eval tooling.
pub fn teacher_entropy_probe(
    model: &Model,
    state: &ModelState,
    corpus: &Corpus,
    tau_teacher: f64,
) -> Result<f64> {
    let input = model.config.encoder.input_size;
    let center = state.center_f64();
    let mut total = 0.0;
    for img in &corpus.images {
        let view = img.pixels.resize_bilinear(input, input);
        let feat = model.encode(&state.teacher, &view)?;
        let logits = model.loc_project(&state.teacher, &feat)?;
        let logits64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let p = losses::teacher_distribution(&logits64, Some(&center), tau_teacher)?;
        total += losses::entropy(&p);
    }
    Ok(total / corpus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, EncoderKind, HeadConfig, ModelConfig};
    use crate::synthgen::{generate_corpus, SceneSpec};

    fn tiny_model() -> (Model, ModelState) {
        let config = ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::SmallConv,
                feature_dim: 32,
                input_size: 32,
                in_channels: 1,
            },
            head: HeadConfig {
                hidden: 32,
                output_k: 64,
            },
            n_parts: 4,
        };
        let model = Model::new(config).unwrap();
        let state = ModelState::init(&model, 17);
        (model, state)
    }

    fn tiny_corpus(count: usize) -> Corpus {
        generate_corpus(
            &SceneSpec {
                image_size: 64,
                n_landmark_classes: 4,
                structure_depth: 3,
                noise_level: 0.05,
                seed: 5,
            },
            count,
        )
        .unwrap()
    }

    #[test]
    fn extraction_counts_and_determinism() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(5);
        let set = extract_landmark_embeddings(&model, &state, &corpus, 24, &[1]).unwrap();
        assert_eq!(set.entries.len(), 4 * 5);
        let set2 = extract_landmark_embeddings(&model, &state, &corpus, 24, &[1]).unwrap();
        for (a, b) in set.entries.iter().zip(set2.entries.iter()) {
            assert_eq!(a.embedding, b.embedding);
        }
        let multi =
            extract_landmark_embeddings(&model, &state, &corpus, 24, &[1, 2, 3]).unwrap();
        assert_eq!(multi.entries.len(), 4 * 5 * 3);
        assert!(extract_landmark_embeddings(&model, &state, &corpus, 24, &[]).is_err());
        assert!(extract_landmark_embeddings(&model, &state, &corpus, 24, &[0]).is_err());
    }

    #[test]
    fn extraction_rejects_missing_landmarks() {
        let (model, state) = tiny_model();
        let mut corpus = tiny_corpus(2);
        corpus.images[1].landmarks.clear();
        assert!(extract_landmark_embeddings(&model, &state, &corpus, 24, &[1]).is_err());
    }

    #[test]
    fn intra_cluster_hand_instances() {
        // identical embeddings: degenerate, flagged
        let set = LandmarkEmbeddingSet {
            entries: (0..4)
                .map(|i| LandmarkEmbedding {
                    class_id: i % 2,
                    subject_id: i,
                    level: 1,
                    embedding: vec![1.0, 1.0],
                })
                .collect(),
        };
        let r = intra_cluster_stats(&set, false).unwrap();
        assert!(r.degenerate);

        // singleton class rejected, naming the class
        let set = LandmarkEmbeddingSet {
            entries: vec![
                LandmarkEmbedding {
                    class_id: 0,
                    subject_id: 0,
                    level: 1,
                    embedding: vec![0.0, 0.0],
                },
                LandmarkEmbedding {
                    class_id: 0,
                    subject_id: 1,
                    level: 1,
                    embedding: vec![0.0, 1.0],
                },
                LandmarkEmbedding {
                    class_id: 9,
                    subject_id: 2,
                    level: 1,
                    embedding: vec![10.0, 0.0],
                },
            ],
        };
        let err = intra_cluster_stats(&set, false).unwrap_err().to_string();
        assert!(err.contains('9'));

        // adding (10, 1): intra means both exactly 1.0
        let mut entries = set.entries;
        entries.push(LandmarkEmbedding {
            class_id: 9,
            subject_id: 3,
            level: 1,
            embedding: vec![10.0, 1.0],
        });
        let r = intra_cluster_stats(&LandmarkEmbeddingSet { entries }, false).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[0].summary.mean, 1.0);
        assert_eq!(r.per_class[1].summary.mean, 1.0);
        assert!(r.silhouette > 0.8);
    }

    #[test]
    fn composition_values_in_range_and_deterministic() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(4);
        let r = composition_similarity(&model, &state, &corpus, &[1, 2, 3, 4], 6, 3).unwrap();
        assert_eq!(r.groups.len(), 4);
        for g in &r.groups {
            assert_eq!(g.values.len(), 6);
            for &v in &g.values {
                assert!((-1.0..=1.0).contains(&v), "{v}");
            }
        }
        let r2 = composition_similarity(&model, &state, &corpus, &[1, 2, 3, 4], 6, 3).unwrap();
        for (a, b) in r.groups.iter().zip(r2.groups.iter()) {
            assert_eq!(a.values, b.values);
        }
        assert!(composition_similarity(&model, &state, &corpus, &[5], 6, 3).is_err());
        assert!(composition_similarity(&model, &state, &corpus, &[2], 0, 3).is_err());
    }

    #[test]
    fn interpolation_endpoints_are_exactly_one() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(3);
        let r = interpolate_extrapolate(&model, &state, &corpus, &[0.0, 1.0], 5, 16, 11).unwrap();
        for g in &r.groups {
            if g.grouping.starts_with("interp") {
                for &v in &g.values {
                    assert_eq!(v, 1.0, "group {}", g.grouping);
                }
            }
        }
        // extrapolation at t = 0 predicts E_B for point D = B: also exact
        let extrap0 = r.groups.iter().find(|g| g.grouping == "extrap_t=0").unwrap();
        for &v in &extrap0.values {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn interpolation_mid_values_bounded() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(3);
        let r = interpolate_extrapolate(&model, &state, &corpus, &[0.5], 8, 16, 12).unwrap();
        for g in &r.groups {
            for &v in &g.values {
                assert!((-1.0..=1.0).contains(&v));
                assert!(v.is_finite());
            }
        }
        assert!(interpolate_extrapolate(&model, &state, &corpus, &[1.5], 4, 16, 1).is_err());
    }

    #[test]
    fn matching_single_candidate_when_stride_spans_image() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(2);
        let query = &corpus.images[0];
        let key = &corpus.images[1].pixels;
        // stride = image side: only the (0,0) window exists
        let matches = match_landmarks(&model, &state, query, key, None, 24, 64).unwrap();
        assert_eq!(matches.len(), 4);
        for m in &matches {
            assert_eq!(m.matched_x, 12.0);
            assert_eq!(m.matched_y, 12.0);
        }
    }

    #[test]
    fn matching_supports_explicit_points_and_validates() {
        let (model, state) = tiny_model();
        let corpus = tiny_corpus(2);
        let query = &corpus.images[0];
        let key = &corpus.images[1].pixels;
        let points: Vec<(u32, f32, f32)> =
            (0..13).map(|i| (i, 20.0 + i as f32, 30.0)).collect();
        let matches = match_landmarks(&model, &state, query, key, Some(&points), 16, 8).unwrap();
        assert_eq!(matches.len(), 13);
        assert!(match_landmarks(&model, &state, query, key, None, 0, 8).is_err());
        assert!(match_landmarks(&model, &state, query, key, None, 128, 8).is_err());
    }

    #[test]
    fn pca_reducer_projects_to_plane() {
        let mut rng = Pcg32::new(3, 3);
        let data: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let base = if i % 2 == 0 { 0.0 } else { 5.0 };
                (0..8).map(|_| base + rng.normal_f32() * 0.1).collect()
            })
            .collect();
        let proj = PcaReducer::default().reduce(&data);
        assert_eq!(proj.len(), 40);
        // the two blobs separate along the first component
        let a: f64 = proj.iter().step_by(2).map(|p| p[0]).sum::<f64>() / 20.0;
        let b: f64 = proj.iter().skip(1).step_by(2).map(|p| p[0]).sum::<f64>() / 20.0;
        assert!((a - b).abs() > 1.0);
    }
}
