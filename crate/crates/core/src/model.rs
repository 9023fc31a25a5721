//! Student/teacher encoder pair, projection heads, and the EMA update.
//!
//! Parameter layout: the *student* collection holds `encoder.*`,
//! `loc_head.*`, `comp_head.*`, and `decomp_head.*`; the *teacher* collection
//! mirrors only `encoder.*` and `loc_head.*` and is never touched by the
//! optimizer — it moves exclusively through [`ema_update`]. The composability
//! and decomposability heads are student-only and gradient-trained.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    gap, gap_backward, layer_norm, layer_norm_backward, leaky_relu, leaky_relu_backward, Conv2d,
    Linear, Mlp, MlpTrace, NormalizedLinear, ParamCollection,
};
use crate::rng::{stream, Pcg32};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub use crate::nn::params::ema_update;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Four stride-2 3x3 conv stages with leaky ReLU and global average
    /// pooling; channel widths `[d/8, d/4, d/2, d]`.
    SmallConv,
    /// Caller-supplied backbone; see [`ModelBuilder::with_backbone`].
    Pluggable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Embedding width `d`.
    pub feature_dim: usize,
    /// Canonical (global view) input side in pixels. The conv encoder also
    /// accepts smaller square views down to [`SmallConv::MIN_SIDE`].
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::SmallConv,
            feature_dim: 128,
            input_size: 224,
            in_channels: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::invalid(format!(
                "feature_dim {} < 8",
                self.feature_dim
            )));
        }
        if self.kind == EncoderKind::SmallConv && self.feature_dim % 8 != 0 {
            return Err(Error::invalid(format!(
                "small_conv feature_dim {} must be divisible by 8",
                self.feature_dim
            )));
        }
        if self.input_size < SmallConv::MIN_SIDE {
            return Err(Error::invalid(format!(
                "input_size {} < {}",
                self.input_size,
                SmallConv::MIN_SIDE
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Head widths. `hidden` is shared by all three heads; `output_k` is the
/// localizability projection width `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub output_k: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 256,
            output_k: 1024,
        }
    }
}

impl HeadConfig {
    /// Widths used by the full-size training recipe.
    pub fn paper_scale() -> Self {
        HeadConfig {
            hidden: 2048,
            output_k: 65536,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Part count `n` used by the composability/decomposability heads.
    pub n_parts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            n_parts: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.hidden == 0 || self.head.output_k == 0 {
            return Err(Error::invalid("head widths must be positive"));
        }
        if self.n_parts == 0 || self.n_parts > 16 {
            return Err(Error::invalid(format!(
                "n_parts {} outside 1..=16",
                self.n_parts
            )));
        }
        Ok(())
    }
}

/// Opaque activation record handed from `forward_train` to `backward`.
pub type BackboneTrace = Box<dyn std::any::Any + Send>;

/// Architecture-neutral encoder interface. Parameters are owned by the
/// caller so the same backbone instance serves both student and teacher.
pub trait Backbone: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn init_params(&self, params: &mut ParamCollection, rng: &mut Pcg32);
    fn forward(&self, params: &ParamCollection, view: &Image) -> Result<Vec<f32>>;
    fn forward_train(&self, params: &ParamCollection, view: &Image)
        -> Result<(Vec<f32>, BackboneTrace)>;
    fn backward(
        &self,
        params: &ParamCollection,
        trace: &BackboneTrace,
        grad_feature: &[f32],
        grads: &mut ParamCollection,
    );
}

/// Default backbone: 4 stride-2 conv stages + GAP.
#[derive(Debug, Clone)]
pub struct SmallConv {
    stages: Vec<Conv2d>,
    in_channels: usize,
    feature_dim: usize,
}

/// Stage activations kept for backward; also consumed directly by the
/// segmentation decoder, which taps the per-stage outputs as skip inputs.
pub struct SmallConvTrace {
    /// Input to each conv stage (stage 0 input is the raw image buffer).
    pub stage_inputs: Vec<Vec<f32>>,
    /// Pre-activation conv outputs per stage.
    pub pres: Vec<Vec<f32>>,
    /// Post-activation outputs per stage.
    pub outs: Vec<Vec<f32>>,
    /// `(h, w)` of each stage input; last entry is the final output size.
    pub dims: Vec<(usize, usize)>,
}

impl SmallConv {
    /// Smallest square input the four stride-2 stages make sense for.
    pub const MIN_SIDE: usize = 16;

    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let widths = [d / 8, d / 4, d / 2, d];
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in widths.iter().enumerate() {
            stages.push(Conv2d::new(format!("encoder.conv{i}"), cin, cout, 2));
            cin = cout;
        }
        Ok(SmallConv {
            stages,
            in_channels: config.in_channels,
            feature_dim: d,
        })
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_ch).collect()
    }

    fn check_input(&self, view: &Image) -> Result<()> {
        if view.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "view has {} channels, encoder expects {}",
                view.channels(),
                self.in_channels
            )));
        }
        if !view.is_square() {
            return Err(Error::shape(format!(
                "view {}x{} is not square",
                view.width(),
                view.height()
            )));
        }
        if view.width() < Self::MIN_SIDE {
            return Err(Error::shape(format!(
                "view side {} below minimum {}",
                view.width(),
                Self::MIN_SIDE
            )));
        }
        Ok(())
    }

    /// Standardize a view per channel to zero mean, unit variance. Keeps the
    /// features insensitive to global brightness/contrast, the job batch
    /// normalization does in bigger backbones.
    fn standardize(view: &Image) -> Vec<f32> {
        let hw = view.height() * view.width();
        let mut out = Vec::with_capacity(view.data().len());
        for ch in 0..view.channels() {
            let plane = view.plane(ch);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = plane
                .iter()
                .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                .sum::<f64>()
                / hw as f64;
            let inv = 1.0 / (var.sqrt() + 1e-5);
            out.extend(plane.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
        }
        out
    }

    /// Full forward pass retaining every stage activation.
    pub fn forward_full(&self, params: &ParamCollection, view: &Image) -> Result<SmallConvTrace> {
        self.check_input(view)?;
        let mut dims = vec![(view.height(), view.width())];
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        let mut pres = Vec::with_capacity(self.stages.len());
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut cur = Self::standardize(view);
        for stage in &self.stages {
            let (h, w) = *dims.last().unwrap();
            stage_inputs.push(cur.clone());
            let pre = stage.forward(params, &cur, h, w);
            cur = leaky_relu(&pre);
            pres.push(pre);
            outs.push(cur.clone());
            dims.push((stage.out_side(h), stage.out_side(w)));
        }
        Ok(SmallConvTrace {
            stage_inputs,
            pres,
            outs,
            dims,
        })
    }

    /// Backward through the conv stack given the GAP-level feature gradient
    /// plus optional extra gradients injected at each stage output (skips).
    pub fn backward_full(
        &self,
        params: &ParamCollection,
        trace: &SmallConvTrace,
        grad_feature: Option<&[f32]>,
        grad_stage_outs: Option<&[Vec<f32>]>,
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let n = self.stages.len();
        let (fh, fw) = trace.dims[n];
        let mut g = match grad_feature {
            Some(gf) => gap_backward(gf, self.feature_dim, fh, fw),
            None => vec![0.0; self.feature_dim * fh * fw],
        };
        for i in (0..n).rev() {
            if let Some(extra) = grad_stage_outs {
                for (gv, ev) in g.iter_mut().zip(extra[i].iter()) {
                    *gv += *ev;
                }
            }
            let g_pre = leaky_relu_backward(&trace.pres[i], &g);
            let (h, w) = trace.dims[i];
            g = self.stages[i].backward(params, &trace.stage_inputs[i], h, w, &g_pre, grads);
        }
        g
    }
}

impl Backbone for SmallConv {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn init_params(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        for stage in &self.stages {
            stage.init(params, rng);
        }
    }

    fn forward(&self, params: &ParamCollection, view: &Image) -> Result<Vec<f32>> {
        let trace = self.forward_full(params, view)?;
        let (h, w) = trace.dims[self.stages.len()];
        Ok(gap(trace.outs.last().unwrap(), self.feature_dim, h, w))
    }

    fn forward_train(
        &self,
        params: &ParamCollection,
        view: &Image,
    ) -> Result<(Vec<f32>, BackboneTrace)> {
        let trace = self.forward_full(params, view)?;
        let (h, w) = trace.dims[self.stages.len()];
        let feat = gap(trace.outs.last().unwrap(), self.feature_dim, h, w);
        Ok((feat, Box::new(trace)))
    }

    fn backward(
        &self,
        params: &ParamCollection,
        trace: &BackboneTrace,
        grad_feature: &[f32],
        grads: &mut ParamCollection,
    ) {
        let trace = trace
            .downcast_ref::<SmallConvTrace>()
            .expect("trace produced by a different backbone");
        self.backward_full(params, trace, Some(grad_feature), None, grads);
    }
}

/// Localizability projection head: two hidden layers, an affine-free layer
/// normalization at the bottleneck, and a bias-free final layer with
/// unit-normalized prototype rows. The bottleneck normalization strips the
/// per-sample common mode that dominates pooled conv features and fixes the
/// activation scale; unit prototypes then keep logit spread commensurate
/// with the sharpening temperatures, so the teacher's target sharpness stays
/// in a stable band instead of drifting toward uniform.
#[derive(Debug, Clone)]
pub struct LocHead {
    fc0: Linear,
    fc1: Linear,
    fc2: NormalizedLinear,
}

pub struct LocHeadTrace {
    x: Vec<f32>,
    pre0: Vec<f32>,
    h1: Vec<f32>,
    pre1: Vec<f32>,
    normed: Vec<f32>,
    inv_std: f32,
}

impl LocHead {
    fn new(prefix: &str, in_dim: usize, hidden: usize, out_k: usize) -> LocHead {
        LocHead {
            fc0: Linear::new(format!("{prefix}.fc0"), in_dim, hidden),
            fc1: Linear::new(format!("{prefix}.fc1"), hidden, hidden),
            fc2: NormalizedLinear::new(format!("{prefix}.fc2"), hidden, out_k),
        }
    }

    fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        self.fc0.init(params, rng);
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    fn forward(&self, params: &ParamCollection, x: &[f32]) -> Vec<f32> {
        let h1 = leaky_relu(&self.fc0.forward(params, x));
        let h2 = leaky_relu(&self.fc1.forward(params, &h1));
        let (normed, _) = layer_norm(&h2);
        self.fc2.forward(params, &normed)
    }

    fn forward_train(&self, params: &ParamCollection, x: &[f32]) -> (Vec<f32>, LocHeadTrace) {
        let pre0 = self.fc0.forward(params, x);
        let h1 = leaky_relu(&pre0);
        let pre1 = self.fc1.forward(params, &h1);
        let h2 = leaky_relu(&pre1);
        let (normed, inv_std) = layer_norm(&h2);
        let z = self.fc2.forward(params, &normed);
        (
            z,
            LocHeadTrace {
                x: x.to_vec(),
                pre0,
                h1,
                pre1,
                normed,
                inv_std,
            },
        )
    }

    fn backward(
        &self,
        params: &ParamCollection,
        trace: &LocHeadTrace,
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let g = self.fc2.backward(params, &trace.normed, gy, grads);
        let g = layer_norm_backward(&trace.normed, trace.inv_std, &g);
        let g = leaky_relu_backward(&trace.pre1, &g);
        let g = self.fc1.backward(params, &trace.h1, &g, grads);
        let g = leaky_relu_backward(&trace.pre0, &g);
        self.fc0.backward(params, &trace.x, &g, grads)
    }
}

/// Runtime model: backbone plus the three projection heads. Stateless with
/// respect to parameters; pass the student or teacher collection explicitly.
pub struct Model {
    pub config: ModelConfig,
    backbone: Arc<dyn Backbone>,
    loc_head: LocHead,
    comp_head: Mlp,
    decomp_head: Mlp,
}

/// Builds a [`Model`], providing the hook for non-default backbones.
pub struct ModelBuilder {
    config: ModelConfig,
    backbone: Option<Arc<dyn Backbone>>,
}

impl ModelBuilder {
    pub fn new(config: ModelConfig) -> Self {
        ModelBuilder {
            config,
            backbone: None,
        }
    }

    pub fn with_backbone(mut self, backbone: Arc<dyn Backbone>) -> Self {
        self.backbone = Some(backbone);
        self
    }

    pub fn build(self) -> Result<Model> {
        self.config.validate()?;
        let backbone: Arc<dyn Backbone> = match (self.config.encoder.kind, self.backbone) {
            (_, Some(b)) => b,
            (EncoderKind::SmallConv, None) => Arc::new(SmallConv::new(&self.config.encoder)?),
            (EncoderKind::Pluggable, None) => return Err(Error::PluggableBackbone),
        };
        let d = self.config.encoder.feature_dim;
        if backbone.feature_dim() != d {
            return Err(Error::shape(format!(
                "backbone feature_dim {} != config {}",
                backbone.feature_dim(),
                d
            )));
        }
        let h = self.config.head.hidden;
        let k = self.config.head.output_k;
        let n = self.config.n_parts;
        Ok(Model {
            config: self.config,
            backbone,
            loc_head: LocHead::new("loc_head", d, h, k),
            comp_head: Mlp::new("comp_head", &[n * d, h, d]),
            decomp_head: Mlp::new("decomp_head", &[d, h, n * d]),
        })
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        ModelBuilder::new(config).build()
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn feature_dim(&self) -> usize {
        self.config.encoder.feature_dim
    }

    pub fn output_k(&self) -> usize {
        self.config.head.output_k
    }

    pub fn n_parts(&self) -> usize {
        self.config.n_parts
    }

    /// Fresh parameter collections: `(student, teacher)`. The teacher starts
    /// as an exact copy of the student's encoder and localizability head.
    pub fn init_params(&self, seed: u64) -> (ParamCollection, ParamCollection) {
        let mut rng = Pcg32::from_coords(seed, &[stream::INIT]);
        let mut student = ParamCollection::new();
        self.backbone.init_params(&mut student, &mut rng);
        self.loc_head.init(&mut student, &mut rng);
        self.comp_head.init(&mut student, &mut rng, 1.0);
        self.decomp_head.init(&mut student, &mut rng, 1.0);

        let mut teacher = student.subset_by_prefix("encoder.");
        for p in student.subset_by_prefix("loc_head.").iter() {
            teacher.add(p.clone());
        }
        (student, teacher)
    }

    /// Encoder forward in evaluation mode: deterministic, no trace.
    pub fn encode(&self, params: &ParamCollection, view: &Image) -> Result<Vec<f32>> {
        self.backbone.forward(params, view)
    }

    pub fn encode_train(
        &self,
        params: &ParamCollection,
        view: &Image,
    ) -> Result<(Vec<f32>, BackboneTrace)> {
        self.backbone.forward_train(params, view)
    }

    pub fn encode_backward(
        &self,
        params: &ParamCollection,
        trace: &BackboneTrace,
        grad: &[f32],
        grads: &mut ParamCollection,
    ) {
        self.backbone.backward(params, trace, grad, grads);
    }

    /// Localizability projection: feature (length d) -> logits (length K).
    pub fn loc_project(&self, params: &ParamCollection, feature: &[f32]) -> Result<Vec<f32>> {
        self.check_feature(feature)?;
        Ok(self.loc_head.forward(params, feature))
    }

    pub fn loc_project_train(
        &self,
        params: &ParamCollection,
        feature: &[f32],
    ) -> Result<(Vec<f32>, LocHeadTrace)> {
        self.check_feature(feature)?;
        Ok(self.loc_head.forward_train(params, feature))
    }

    pub fn loc_backward(
        &self,
        params: &ParamCollection,
        trace: &LocHeadTrace,
        grad: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        self.loc_head.backward(params, trace, grad, grads)
    }

    /// Aggregate part features (canonical order) into one embedding.
    pub fn compose(&self, params: &ParamCollection, part_features: &[Vec<f32>]) -> Result<Vec<f32>> {
        Ok(self.comp_head.forward(params, &self.concat_parts(part_features)?))
    }

    pub fn compose_train(
        &self,
        params: &ParamCollection,
        part_features: &[Vec<f32>],
    ) -> Result<(Vec<f32>, MlpTrace)> {
        Ok(self
            .comp_head
            .forward_train(params, &self.concat_parts(part_features)?))
    }

    /// Backward through the composability head; the returned gradient is
    /// split back into per-part feature gradients.
    pub fn compose_backward(
        &self,
        params: &ParamCollection,
        trace: &MlpTrace,
        grad: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<Vec<f32>> {
        let g = self.comp_head.backward(params, trace, grad, grads);
        let d = self.feature_dim();
        g.chunks(d).map(|c| c.to_vec()).collect()
    }

    /// Predict the `n` part embeddings from a whole embedding. Block `i` of
    /// the head output pairs with canonical part `i`.
    pub fn decompose(
        &self,
        params: &ParamCollection,
        whole_embedding: &[f32],
        n: usize,
    ) -> Result<Vec<Vec<f32>>> {
        self.check_feature(whole_embedding)?;
        self.check_n(n)?;
        let out = self.decomp_head.forward(params, whole_embedding);
        Ok(split_blocks(&out, self.feature_dim()))
    }

    pub fn decompose_train(
        &self,
        params: &ParamCollection,
        whole_embedding: &[f32],
        n: usize,
    ) -> Result<(Vec<Vec<f32>>, MlpTrace)> {
        self.check_feature(whole_embedding)?;
        self.check_n(n)?;
        let (out, trace) = self.decomp_head.forward_train(params, whole_embedding);
        Ok((split_blocks(&out, self.feature_dim()), trace))
    }

    pub fn decompose_backward(
        &self,
        params: &ParamCollection,
        trace: &MlpTrace,
        grad_blocks: &[Vec<f32>],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let flat: Vec<f32> = grad_blocks.iter().flatten().copied().collect();
        self.decomp_head.backward(params, trace, &flat, grads)
    }

    fn concat_parts(&self, part_features: &[Vec<f32>]) -> Result<Vec<f32>> {
        self.check_n(part_features.len())?;
        let d = self.feature_dim();
        let mut flat = Vec::with_capacity(part_features.len() * d);
        for (i, f) in part_features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::shape(format!(
                    "part feature {i} has length {}, expected {d}",
                    f.len()
                )));
            }
            flat.extend_from_slice(f);
        }
        Ok(flat)
    }

    fn check_feature(&self, feature: &[f32]) -> Result<()> {
        if feature.len() != self.feature_dim() {
            return Err(Error::shape(format!(
                "feature length {} != d {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n != self.config.n_parts {
            return Err(Error::shape(format!(
                "part count {n} != configured n_parts {}",
                self.config.n_parts
            )));
        }
        Ok(())
    }
}

fn split_blocks(flat: &[f32], d: usize) -> Vec<Vec<f32>> {
    flat.chunks(d).map(|c| c.to_vec()).collect()
}

/// Cosine EMA coefficient schedule:
/// `lambda(step) = end - (end - start) * (cos(pi * step / total) + 1) / 2`.
/// Equals `start` at step 0, `end` at `total_steps`, nondecreasing between.
pub fn ema_coefficient(step: u64, total_steps: u64, start: f64, end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
        return Err(Error::invalid(format!(
            "ema bounds ({start}, {end}) must satisfy 0 <= start <= end <= 1"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(end - (end - start) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0)
}

/// Complete training state: student, teacher, center vector, step counters.
pub struct ModelState {
    pub config: ModelConfig,
    pub student: ParamCollection,
    pub teacher: ParamCollection,
    pub center: Vec<f32>,
    pub step: u64,
    pub total_steps: u64,
}

impl ModelState {
    pub fn init(model: &Model, seed: u64) -> ModelState {
        let (student, teacher) = model.init_params(seed);
        ModelState {
            config: model.config,
            student,
            teacher,
            center: vec![0.0; model.output_k()],
            step: 0,
            total_steps: 0,
        }
    }

    pub fn center_f64(&self) -> Vec<f64> {
        self.center.iter().map(|&v| v as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::SmallConv,
                feature_dim: 16,
                input_size: 16,
                in_channels: 1,
            },
            head: HeadConfig {
                hidden: 8,
                output_k: 12,
            },
            n_parts: 4,
        }
    }

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = Pcg32::new(seed, 0);
        Image::from_fn(side, side, 1, |_, _, _| rng.uniform_f32())
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 1);
        let img = random_image(16, 9);
        let a = model.encode(&state.student, &img).unwrap();
        let b = model.encode(&state.student, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 1);
        let tall = Image::zeros(16, 18, 1);
        assert!(model.encode(&state.student, &tall).is_err());
        let tiny = Image::zeros(8, 8, 1);
        assert!(model.encode(&state.student, &tiny).is_err());
        let rgb = Image::zeros(16, 16, 3);
        assert!(model.encode(&state.student, &rgb).is_err());
    }

    #[test]
    fn loc_projection_shape_and_determinism() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 2);
        let feat = vec![0.25; 16];
        let a = model.loc_project(&state.student, &feat).unwrap();
        let b = model.loc_project(&state.student, &feat).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(model.loc_project(&state.student, &[0.0; 7]).is_err());
    }

    #[test]
    fn compose_shapes_and_order_sensitivity() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 3);
        let mut rng = Pcg32::new(7, 7);
        let parts: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..16).map(|_| rng.normal_f32()).collect())
            .collect();
        let z = model.compose(&state.student, &parts).unwrap();
        assert_eq!(z.len(), 16);

        let mut swapped = parts.clone();
        swapped.swap(0, 3);
        let z2 = model.compose(&state.student, &swapped).unwrap();
        assert_ne!(z, z2, "composition must be order-sensitive");

        let z3 = model.compose(&state.student, &parts).unwrap();
        assert_eq!(z, z3);

        assert!(model.compose(&state.student, &parts[..3]).is_err());
        let bad = vec![vec![0.0; 5]; 4];
        assert!(model.compose(&state.student, &bad).is_err());
    }

    #[test]
    fn decompose_splits_head_output_exactly() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 4);
        let emb = vec![0.5; 16];
        let blocks = model.decompose(&state.student, &emb, 4).unwrap();
        assert_eq!(blocks.len(), 4);
        assert!(blocks.iter().all(|b| b.len() == 16));
        // re-concatenating the blocks reproduces the raw head output
        let flat: Vec<f32> = blocks.iter().flatten().copied().collect();
        let raw = Mlp::new("decomp_head", &[16, 8, 64]).forward(&state.student, &emb);
        assert_eq!(flat, raw);

        assert!(model.decompose(&state.student, &emb, 3).is_err());
        assert!(model.decompose(&state.student, &[0.0; 4], 4).is_err());
    }

    #[test]
    fn ema_coefficient_endpoints_and_midpoint() {
        assert_eq!(ema_coefficient(0, 100, 0.996, 1.0).unwrap(), 0.996);
        assert_eq!(ema_coefficient(100, 100, 0.996, 1.0).unwrap(), 1.0);
        let mid = ema_coefficient(50, 100, 0.996, 1.0).unwrap();
        assert!((mid - 0.998).abs() < 1e-12);
        assert!(ema_coefficient(1, 0, 0.996, 1.0).is_err());
    }

    #[test]
    fn ema_coefficient_monotone() {
        let mut prev = 0.0;
        for step in 0..=1000 {
            let v = ema_coefficient(step, 1000, 0.996, 1.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn pluggable_without_backbone_errors() {
        let mut cfg = tiny_config();
        cfg.encoder.kind = EncoderKind::Pluggable;
        match Model::new(cfg) {
            Err(Error::PluggableBackbone) => {}
            Err(other) => panic!("expected PluggableBackbone error, got {other}"),
            Ok(_) => panic!("expected PluggableBackbone error, got a model"),
        }
    }

    #[test]
    fn pluggable_accepts_registered_backbone() {
        let mut cfg = tiny_config();
        cfg.encoder.kind = EncoderKind::Pluggable;
        let inner = SmallConv::new(&EncoderConfig {
            kind: EncoderKind::SmallConv,
            ..cfg.encoder
        })
        .unwrap();
        let model = ModelBuilder::new(cfg)
            .with_backbone(Arc::new(inner))
            .build()
            .unwrap();
        let state = ModelState::init(&model, 5);
        let img = random_image(16, 1);
        assert_eq!(model.encode(&state.student, &img).unwrap().len(), 16);
    }

    #[test]
    fn teacher_mirrors_encoder_and_loc_head_only() {
        let model = Model::new(tiny_config()).unwrap();
        let state = ModelState::init(&model, 6);
        for p in state.teacher.iter() {
            assert!(
                p.name.starts_with("encoder.") || p.name.starts_with("loc_head."),
                "unexpected teacher param {}",
                p.name
            );
            assert_eq!(p.data, state.student.get(&p.name).data);
        }
        assert!(state.teacher.try_get("comp_head.fc0.w").is_none());
        assert!(state.student.try_get("comp_head.fc0.w").is_some());
        assert!(state.student.try_get("decomp_head.fc1.w").is_some());
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let cfg = tiny_config();
        let model = Model::new(cfg).unwrap();
        let state = ModelState::init(&model, 8);
        let img = random_image(16, 3);

        let mut rng = Pcg32::new(100, 0);
        let proj: Vec<f32> = (0..16).map(|_| rng.normal_f32()).collect();
        let loss = |params: &ParamCollection| -> f64 {
            let f = model.encode(params, &img).unwrap();
            f.iter().zip(&proj).map(|(&a, &p)| (a * p) as f64).sum()
        };

        let (_, trace) = model.encode_train(&state.student, &img).unwrap();
        let mut grads = state.student.zeros_like();
        model.encode_backward(&state.student, &trace, &proj, &mut grads);

        // spot-check a handful of weights in the first and last stages
        for name in ["encoder.conv0.w", "encoder.conv3.w"] {
            let data = state.student.get(name).data.clone();
            for &i in &[0usize, 1, data.len() / 2, data.len() - 1] {
                let mut p2 = state.student.clone();
                let eps = 1e-3;
                p2.get_mut(name).data[i] = data[i] + eps;
                let up = loss(&p2);
                p2.get_mut(name).data[i] = data[i] - eps;
                let down = loss(&p2);
                let fd = (up - down) / (2.0 * eps as f64);
                let an = grads.get(name).data[i] as f64;
                assert!(
                    (an - fd).abs() / fd.abs().max(1e-2) < 3e-2,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
