//! Coarse-to-fine training loop: per-level localizability warm-up followed
//! by joint three-branch training, with AdamW, cosine learning rate, EMA
//! teacher updates, teacher-output centering, collapse monitoring, JSONL
//! metrics, and atomic, bit-compatible checkpointing.
//!
//! Determinism: every stochastic draw comes from a stream derived from
//! `(seed, purpose, step, slot)`, so a resumed run replays the exact batch
//! and augmentation sequence of an uninterrupted one, and thread count never
//! affects results (per-sample work is independent; reduction order is
//! fixed).

use crate::checkpoint::Archive;
use crate::data::{augment, build_anchor_sample, AnchorSample, AugmentConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{
    center_update, composability_loss_grad, decomposability_loss_grad, entropy,
    localizability_loss_grad, teacher_distribution, total_loss, LossWeights, TemperaturePair,
};
use crate::model::{ema_coefficient, ema_update, Model, ModelConfig, ModelState};
use crate::nn::ParamCollection;
use crate::rng::{stream, Pcg32};
use crate::synthgen::Corpus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Localizability branch only (weights `(1, 0, 0)`).
    Warmup,
    /// All three branches with the configured weights.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPhase {
    pub level: u32,
    pub mode: PhaseMode,
    pub epochs: u32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phases: Vec<CurriculumPhase>,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Fraction of total steps spent on linear LR warm-up.
    pub lr_warmup_frac: f64,
    pub weight_decay: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub weights: LossWeights,
    pub temps: TemperaturePair,
    pub center_momentum: f64,
    /// Subtract the running center from teacher logits before sharpening.
    pub centering: bool,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Checkpoint cadence in epochs (phase boundaries always checkpoint).
    pub checkpoint_every_epochs: u32,
}

impl Default for TrainConfig {
    /// Desk-scale configuration: trains on a small synthetic corpus of 64 px
    /// images in minutes on CPU while preserving every shape relationship
    /// (d, K, n, scale hierarchy) of the full-size recipe.
    fn default() -> Self {
        use crate::model::{EncoderConfig, EncoderKind, HeadConfig};
        let phases = (0..=2)
            .flat_map(|level| {
                [
                    CurriculumPhase {
                        level,
                        mode: PhaseMode::Warmup,
                        epochs: 5,
                        batch_size: 8,
                    },
                    CurriculumPhase {
                        level,
                        mode: PhaseMode::Joint,
                        epochs: 10,
                        batch_size: 8,
                    },
                ]
            })
            .collect();
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    kind: EncoderKind::SmallConv,
                    feature_dim: 128,
                    input_size: 64,
                    in_channels: 1,
                },
                head: HeadConfig {
                    hidden: 256,
                    output_k: 1024,
                },
                n_parts: 4,
            },
            phases,
            lr_max: 2e-3,
            lr_min: 1e-5,
            lr_warmup_frac: 0.1,
            weight_decay: 0.005,
            ema_start: 0.996,
            ema_end: 1.0,
            weights: LossWeights::default(),
            temps: TemperaturePair::default(),
            center_momentum: 0.9,
            centering: true,
            sampler: SamplerConfig {
                crops_per_anchor: 8,
                crop_size: 28,
                global_size: 64,
                center_jitter: 0.125,
                n_parts: 4,
                part_jitter: 0.2,
                part_size: 64,
            },
            // milder than the full-size recipe: at 64 px the landmark
            // textures live in ~7 px discs, which heavy blur would erase
            augment: AugmentConfig {
                jitter_strength: 0.2,
                blur_sigma_range: (0.0, 0.6),
                rotation_range: 10.0,
            },
            seed: 0,
            checkpoint_every_epochs: 10,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: 224 px inputs, one 224 global view with eight 96 px
    /// crops, K = 65536 heads, and the published per-level epoch budgets
    /// (warm-up 200/200/100, joint 10/90/165 for levels 0/1/2).
    pub fn paper_scale() -> Self {
        use crate::model::{EncoderConfig, EncoderKind, HeadConfig};
        let budgets = [(0u32, 200u32, 10u32), (1, 200, 90), (2, 100, 165)];
        let phases = budgets
            .iter()
            .flat_map(|&(level, warm, joint)| {
                [
                    CurriculumPhase {
                        level,
                        mode: PhaseMode::Warmup,
                        epochs: warm,
                        batch_size: 512,
                    },
                    CurriculumPhase {
                        level,
                        mode: PhaseMode::Joint,
                        epochs: joint,
                        batch_size: 512,
                    },
                ]
            })
            .collect();
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    kind: EncoderKind::SmallConv,
                    feature_dim: 128,
                    input_size: 224,
                    in_channels: 1,
                },
                head: HeadConfig::paper_scale(),
                n_parts: 4,
            },
            phases,
            sampler: SamplerConfig::default(),
            ..TrainConfig::default()
        }
    }

    pub fn max_level(&self) -> u32 {
        self.phases.iter().map(|p| p.level).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.weights.validate()?;
        self.temps.validate()?;
        if self.phases.is_empty() {
            return Err(Error::invalid("phases must not be empty"));
        }
        let mut prev_level = 0u32;
        let mut joint_seen_at_level = false;
        for (i, p) in self.phases.iter().enumerate() {
            if p.epochs == 0 {
                return Err(Error::invalid(format!("phase {i}: epochs must be >= 1")));
            }
            if p.batch_size == 0 {
                return Err(Error::invalid(format!("phase {i}: batch_size must be >= 1")));
            }
            if i > 0 {
                if p.level < prev_level {
                    return Err(Error::invalid(format!(
                        "phase {i}: levels must be nondecreasing ({} after {prev_level})",
                        p.level
                    )));
                }
                if p.level > prev_level {
                    joint_seen_at_level = false;
                }
            }
            match p.mode {
                PhaseMode::Warmup => {
                    if joint_seen_at_level && p.level == prev_level {
                        return Err(Error::invalid(format!(
                            "phase {i}: warmup must precede joint within level {}",
                            p.level
                        )));
                    }
                }
                PhaseMode::Joint => joint_seen_at_level = true,
            }
            prev_level = p.level;
        }
        if self.sampler.n_parts != self.model.n_parts {
            return Err(Error::invalid(format!(
                "sampler.n_parts {} != model.n_parts {}",
                self.sampler.n_parts, self.model.n_parts
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_start)
            || !(0.0..=1.0).contains(&self.ema_end)
            || self.ema_start > self.ema_end
        {
            return Err(Error::invalid("ema bounds must satisfy 0 <= start <= end <= 1"));
        }
        if self.lr_max < 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::invalid("lr bounds must satisfy 0 <= lr_min <= lr_max"));
        }
        if !(0.0..=1.0).contains(&self.lr_warmup_frac) {
            return Err(Error::invalid("lr_warmup_frac must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::invalid("center_momentum must lie in [0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// One scheduled phase with its resolved step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: CurriculumPhase,
    pub start_step: u64,
    pub steps: u64,
    pub steps_per_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub plans: Vec<PhasePlan>,
    pub total_steps: u64,
    /// Teacher-temperature ramp span: the first warm-up phase, or 10% of
    /// total steps when the schedule opens with a joint phase.
    pub tau_warmup_steps: u64,
    pub lr_warmup_steps: u64,
}

impl Schedule {
    pub fn plan_at(&self, step: u64) -> (usize, &PhasePlan) {
        for (i, plan) in self.plans.iter().enumerate() {
            if step < plan.start_step + plan.steps {
                return (i, plan);
            }
        }
        let last = self.plans.len() - 1;
        (last, &self.plans[last])
    }
}

/// Resolve phase epoch budgets into step budgets for a given corpus size.
pub fn build_schedule(config: &TrainConfig, corpus_len: usize) -> Result<Schedule> {
    config.validate()?;
    if corpus_len == 0 {
        return Err(Error::invalid("corpus is empty"));
    }
    let mut plans = Vec::with_capacity(config.phases.len());
    let mut start = 0u64;
    for phase in &config.phases {
        let spe = corpus_len.div_ceil(phase.batch_size) as u64;
        let steps = spe * phase.epochs as u64;
        plans.push(PhasePlan {
            phase: *phase,
            start_step: start,
            steps,
            steps_per_epoch: spe,
        });
        start += steps;
    }
    let total_steps = start;
    let tau_warmup_steps = plans
        .iter()
        .find(|p| p.phase.mode == PhaseMode::Warmup)
        .map(|p| p.steps)
        .unwrap_or_else(|| (total_steps / 10).max(1));
    let lr_warmup_steps = ((total_steps as f64) * config.lr_warmup_frac).round() as u64;
    Ok(Schedule {
        plans,
        total_steps,
        tau_warmup_steps,
        lr_warmup_steps,
    })
}

/// Cosine learning rate with linear warm-up.
pub fn lr_at(config: &TrainConfig, schedule: &Schedule, step: u64) -> f64 {
    let warm = schedule.lr_warmup_steps;
    if warm > 0 && step < warm {
        return config.lr_max * (step + 1) as f64 / warm as f64;
    }
    let span = (schedule.total_steps - warm).max(1);
    let frac = (step - warm) as f64 / span as f64;
    config.lr_min
        + (config.lr_max - config.lr_min) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
}

/// AdamW with decoupled weight decay. Biases (names ending in `.b`) are
/// exempt from decay. State lives in two shadow collections so it can be
/// checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamCollection,
    pub v: ParamCollection,
    pub t: u64,
}

impl AdamW {
    pub fn new(like: &ParamCollection, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamCollection,
        grads: &ParamCollection,
        lr: f64,
    ) -> Result<()> {
        params.check_same_structure(grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.name.ends_with(".b") {
                0.0
            } else {
                self.weight_decay
            };
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = self.beta1 * m.data[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = p.data[i] as f64;
                p.data[i] = (pi - lr * (update + decay * pi)) as f32;
            }
        }
        Ok(())
    }
}

/// Per-step loss breakdown, one JSON line per step in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema: u32,
    pub step: u64,
    pub phase_index: usize,
    pub level: u32,
    pub mode: PhaseMode,
    pub l_loc: f64,
    pub l_comp: f64,
    pub l_decomp: f64,
    pub total: f64,
    pub weights: [f64; 3],
    pub tau_t: f64,
    pub ema_lambda: f64,
    pub lr: f64,
    /// Mean entropy (nats) of the teacher distribution over the batch: the
    /// collapse monitor.
    pub teacher_entropy: f64,
}

struct SampleOutcome {
    grads: ParamCollection,
    teacher_logits: Vec<f32>,
    l_loc: f64,
    l_comp: f64,
    l_decomp: f64,
    entropy: f64,
}

/// Owns the model, parameters, and optimizer for one training run.
pub struct Trainer {
    pub model: Model,
    pub state: ModelState,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub schedule: Schedule,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Trainer> {
        let schedule = build_schedule(&config, corpus.len())?;
        let model = Model::new(config.model)?;
        let mut state = ModelState::init(&model, config.seed);
        state.total_steps = schedule.total_steps;
        let opt = AdamW::new(&state.student, config.weight_decay);
        let mut trainer = Trainer {
            model,
            state,
            opt,
            config,
            schedule,
        };
        trainer.warm_center(corpus)?;
        Ok(trainer)
    }

    /// Seed the center with the mean teacher logits over a probe batch of
    /// un-augmented whole images, so the very first steps already see
    /// centered (rather than raw) logits. Deterministic; resume paths skip
    /// this because they restore the stored center.
    fn warm_center(&mut self, corpus: &Corpus) -> Result<()> {
        if !self.config.centering || corpus.is_empty() {
            return Ok(());
        }
        let g = self.config.sampler.global_size;
        let probe = corpus.images.iter().take(16);
        let mut logits = Vec::new();
        for img in probe {
            let view = img.pixels.resize_bilinear(g, g);
            let feat = self.model.encode(&self.state.teacher, &view)?;
            logits.push(self.model.loc_project(&self.state.teacher, &feat)?);
        }
        center_update(&mut self.state.center, &logits, 0.0)?;
        Ok(())
    }

    /// One training transaction over a batch of anchors: teacher/student
    /// forwards, the three branch losses (composability/decomposability
    /// skipped in warm-up), optimizer step, EMA update, center update.
    pub fn train_step(
        &mut self,
        batch: &[AnchorSample],
        phase: &CurriculumPhase,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (i, s) in batch.iter().enumerate() {
            if s.level != phase.level {
                return Err(Error::invalid(format!(
                    "batch sample {i} at level {}, phase expects {}",
                    s.level, phase.level
                )));
            }
        }
        let step = self.state.step;
        let warmup = phase.mode == PhaseMode::Warmup;
        let weights = if warmup {
            LossWeights::warmup()
        } else {
            self.config.weights
        };
        let tau_t = self
            .config
            .temps
            .teacher_at(step, self.schedule.tau_warmup_steps);
        let lr = lr_at(&self.config, &self.schedule, step);
        let center = self.state.center_f64();
        let center_opt = if self.config.centering {
            Some(center.as_slice())
        } else {
            None
        };

        let outcomes: Vec<Result<SampleOutcome>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, sample)| {
                self.sample_pass(sample, slot, step, warmup, &weights, tau_t, center_opt)
            })
            .collect();

        let mut grads = self.state.student.zeros_like();
        let mut teacher_batch = Vec::with_capacity(batch.len());
        let (mut l_loc, mut l_comp, mut l_decomp, mut ent) = (0.0, 0.0, 0.0, 0.0);
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            if !(o.l_loc.is_finite() && o.l_comp.is_finite() && o.l_decomp.is_finite()) {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss at step {step}, batch index {i} (source {}): \
                     loc={} comp={} decomp={}",
                    batch[i].source_id, o.l_loc, o.l_comp, o.l_decomp
                )));
            }
            grads.accumulate(&o.grads)?;
            teacher_batch.push(o.teacher_logits);
            l_loc += o.l_loc;
            l_comp += o.l_comp;
            l_decomp += o.l_decomp;
            ent += o.entropy;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n as f32);
        l_loc /= n;
        l_comp /= n;
        l_decomp /= n;
        ent /= n;
        let total = total_loss(l_loc, l_comp, l_decomp, &weights)?;

        self.opt.step(&mut self.state.student, &grads, lr)?;

        let lambda = ema_coefficient(
            step,
            self.state.total_steps.max(1),
            self.config.ema_start,
            self.config.ema_end,
        )?;
        ema_update(&mut self.state.teacher, &self.state.student, lambda)?;

        if self.config.centering {
            center_update(
                &mut self.state.center,
                &teacher_batch,
                self.config.center_momentum,
            )?;
        }
        self.state.step += 1;

        Ok(StepMetrics {
            schema: crate::SCHEMA_VERSION,
            step,
            phase_index: self.schedule.plan_at(step).0,
            level: phase.level,
            mode: phase.mode,
            l_loc,
            l_comp,
            l_decomp,
            total,
            weights: [
                weights.localizability,
                weights.composability,
                weights.decomposability,
            ],
            tau_t,
            ema_lambda: lambda,
            lr,
            teacher_entropy: ent,
        })
    }

    /// Forward/backward for one anchor. Pure function of the sample, the
    /// frozen parameter snapshot, and the derived RNG stream — safe to run
    /// in parallel across the batch.
    #[allow(clippy::too_many_arguments)]
    fn sample_pass(
        &self,
        sample: &AnchorSample,
        slot: usize,
        step: u64,
        warmup: bool,
        weights: &LossWeights,
        tau_t: f64,
        center: Option<&[f64]>,
    ) -> Result<SampleOutcome> {
        let cfg = &self.config;
        let model = &self.model;
        let student = &self.state.student;
        let teacher = &self.state.teacher;
        let mut rng = Pcg32::from_coords(cfg.seed, &[stream::AUGMENT, step, slot as u64]);
        let g = cfg.sampler.global_size;
        let global_view = sample.whole.resize_bilinear(g, g);

        let mut grads = student.zeros_like();

        // teacher pathway over the whole: one augmented view feeds both the
        // localizability target and the composability target embedding
        let teacher_view = augment(&global_view, &cfg.augment, &mut rng);
        let y_t = model.encode(teacher, &teacher_view)?;
        let z_t = model.loc_project(teacher, &y_t)?;
        let z_t64: Vec<f64> = z_t.iter().map(|&v| v as f64).collect();
        let p_t = teacher_distribution(&z_t64, center, tau_t)?;
        let sample_entropy = entropy(&p_t);

        // student crops -> localizability
        let mut crop_traces = Vec::with_capacity(sample.crops.len());
        let mut student_logits = Vec::with_capacity(sample.crops.len());
        for crop in &sample.crops {
            let view = augment(crop, &cfg.augment, &mut rng);
            let (feat, enc_trace) = model.encode_train(student, &view)?;
            let (logits, head_trace) = model.loc_project_train(student, &feat)?;
            student_logits.push(logits.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            crop_traces.push((enc_trace, head_trace));
        }
        let (l_loc, loc_grads) =
            localizability_loss_grad(&z_t64, &student_logits, &cfg.temps, tau_t, center)?;
        for ((enc_trace, head_trace), g_logits) in crop_traces.iter().zip(loc_grads.iter()) {
            let g32: Vec<f32> = g_logits
                .iter()
                .map(|&v| (v * weights.localizability) as f32)
                .collect();
            let g_feat = model.loc_backward(student, head_trace, &g32, &mut grads);
            model.encode_backward(student, enc_trace, &g_feat, &mut grads);
        }

        let (mut l_comp, mut l_decomp) = (0.0, 0.0);
        if !warmup {
            // composability: student parts -> compose head vs teacher whole
            let mut part_traces = Vec::with_capacity(sample.parts.len());
            let mut part_feats = Vec::with_capacity(sample.parts.len());
            for (part, _) in &sample.parts {
                let view = augment(part, &cfg.augment, &mut rng);
                let (feat, trace) = model.encode_train(student, &view)?;
                part_feats.push(feat);
                part_traces.push(trace);
            }
            let (z_ps, comp_trace) = model.compose_train(student, &part_feats)?;
            let y_t64: Vec<f64> = y_t.iter().map(|&v| v as f64).collect();
            let z_ps64: Vec<f64> = z_ps.iter().map(|&v| v as f64).collect();
            let (lc, g_zps) = composability_loss_grad(&y_t64, &z_ps64)?;
            l_comp = lc;
            let g32: Vec<f32> = g_zps
                .iter()
                .map(|&v| (v * weights.composability) as f32)
                .collect();
            let part_grads = model.compose_backward(student, &comp_trace, &g32, &mut grads);
            for (trace, g_feat) in part_traces.iter().zip(part_grads.iter()) {
                model.encode_backward(student, trace, g_feat, &mut grads);
            }

            // decomposability: student whole -> decompose head vs teacher parts
            let teacher_part_embs: Vec<Vec<f64>> = sample
                .parts
                .iter()
                .map(|(part, _)| {
                    let view = augment(part, &cfg.augment, &mut rng);
                    let emb = model.encode(teacher, &view)?;
                    Ok(emb.iter().map(|&v| v as f64).collect())
                })
                .collect::<Result<_>>()?;
            let student_whole_view = augment(&global_view, &cfg.augment, &mut rng);
            let (z_ws, whole_trace) = model.encode_train(student, &student_whole_view)?;
            let (blocks, decomp_trace) =
                model.decompose_train(student, &z_ws, cfg.model.n_parts)?;
            let blocks64: Vec<Vec<f64>> = blocks
                .iter()
                .map(|b| b.iter().map(|&v| v as f64).collect())
                .collect();
            let (ld, g_blocks) = decomposability_loss_grad(&teacher_part_embs, &blocks64)?;
            l_decomp = ld;
            let g_blocks32: Vec<Vec<f32>> = g_blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|&v| (v * weights.decomposability) as f32)
                        .collect()
                })
                .collect();
            let g_zws = model.decompose_backward(student, &decomp_trace, &g_blocks32, &mut grads);
            model.encode_backward(student, &whole_trace, &g_zws, &mut grads);
        }

        Ok(SampleOutcome {
            grads,
            teacher_logits: z_t,
            l_loc,
            l_comp,
            l_decomp,
            entropy: sample_entropy,
        })
    }
}

// ---------------------------------------------------------------------------
// full pretraining loop with checkpoint/resume
// ---------------------------------------------------------------------------

/// Assemble the batch for one global step from derived RNG streams: a
/// per-epoch permutation picks the images, a per-(step, slot) stream drives
/// anchor/crop/partition sampling.
pub fn assemble_batch(
    corpus: &Corpus,
    config: &TrainConfig,
    schedule: &Schedule,
    global_step: u64,
) -> Result<(usize, Vec<AnchorSample>)> {
    let (phase_index, plan) = schedule.plan_at(global_step);
    let step_in_phase = global_step - plan.start_step;
    let epoch = step_in_phase / plan.steps_per_epoch;
    let pos = (step_in_phase % plan.steps_per_epoch) as usize;
    let mut perm_rng = Pcg32::from_coords(
        config.seed,
        &[stream::EPOCH, phase_index as u64, epoch],
    );
    let perm = perm_rng.permutation(corpus.len());
    let bs = plan.phase.batch_size;
    let lo = pos * bs;
    let hi = ((pos + 1) * bs).min(corpus.len());
    let samples: Result<Vec<AnchorSample>> = (lo..hi)
        .map(|i| {
            let src = perm[i];
            let mut rng = Pcg32::from_coords(
                config.seed,
                &[stream::ANCHOR, global_step, (i - lo) as u64],
            );
            build_anchor_sample(
                &corpus.images[src].pixels,
                src,
                plan.phase.level,
                &config.sampler,
                &mut rng,
            )
        })
        .collect();
    Ok((phase_index, samples?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps_run: u64,
    pub total_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Metadata block stored in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    schema: u32,
    config: TrainConfig,
    step: u64,
    total_steps: u64,
    phase_index: usize,
    level: u32,
    opt_t: u64,
    /// All randomness is derived from `(seed, purpose, step, slot)` streams,
    /// so the seed plus the step counter fully determines replay.
    rng: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    scheme: String,
    base_seed: u64,
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let step = trainer.state.step;
    let (phase_index, plan) = trainer.schedule.plan_at(step.min(trainer.schedule.total_steps - 1));
    let meta = CheckpointMeta {
        schema: crate::SCHEMA_VERSION,
        config: trainer.config.clone(),
        step,
        total_steps: trainer.state.total_steps,
        phase_index,
        level: plan.phase.level,
        opt_t: trainer.opt.t,
        rng: RngState {
            scheme: "derived-streams".into(),
            base_seed: trainer.config.seed,
        },
    };
    let mut arch = Archive::new(serde_json::to_value(&meta)?);
    arch.push_collection("student", &trainer.state.student);
    arch.push_collection("teacher", &trainer.state.teacher);
    arch.push_collection("opt_m", &trainer.opt.m);
    arch.push_collection("opt_v", &trainer.opt.v);
    arch.push(
        "center",
        vec![trainer.state.center.len()],
        trainer.state.center.clone(),
    );
    arch.save_atomic(path)
}

/// Restore a trainer, bit-compatibly, from a checkpoint written by
/// [`save_checkpoint`]. `corpus_len` must match the original run.
pub fn load_checkpoint(path: &Path, corpus_len: usize) -> Result<Trainer> {
    let arch = Archive::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(arch.meta.clone())?;
    let config = meta.config;
    let schedule = build_schedule(&config, corpus_len)?;
    if schedule.total_steps != meta.total_steps {
        return Err(Error::invalid(format!(
            "checkpoint was trained with total_steps {}, corpus now gives {}",
            meta.total_steps, schedule.total_steps
        )));
    }
    let model = Model::new(config.model)?;
    let student = arch.take_collection("student")?;
    let teacher = arch.take_collection("teacher")?;
    let center = arch.get("center")?.data.clone();
    if center.len() != config.model.head.output_k {
        return Err(Error::shape(format!(
            "center length {} != K {}",
            center.len(),
            config.model.head.output_k
        )));
    }
    let mut opt = AdamW::new(&student, config.weight_decay);
    opt.m = arch.take_collection("opt_m")?;
    opt.v = arch.take_collection("opt_v")?;
    opt.t = meta.opt_t;
    opt.m.check_same_structure(&student)?;
    opt.v.check_same_structure(&student)?;
    let state = ModelState {
        config: config.model,
        student,
        teacher,
        center,
        step: meta.step,
        total_steps: meta.total_steps,
    };
    Ok(Trainer {
        model,
        state,
        opt,
        config,
        schedule,
    })
}

/// Load just the model and teacher/student parameters for evaluation.
pub fn load_model_state(path: &Path) -> Result<(Model, ModelState)> {
    let arch = Archive::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(arch.meta.clone())?;
    let model = Model::new(meta.config.model)?;
    let state = ModelState {
        config: meta.config.model,
        student: arch.take_collection("student")?,
        teacher: arch.take_collection("teacher")?,
        center: arch.get("center")?.data.clone(),
        step: meta.step,
        total_steps: meta.total_steps,
    };
    Ok((model, state))
}

/// Run the full curriculum over `corpus`, writing JSONL metrics and periodic
/// checkpoints into `out_dir`. Pass `resume` to continue a checkpointed run;
/// metrics for the remaining steps are appended and match an uninterrupted
/// run byte-for-byte.
pub fn pretrain(
    corpus: &Corpus,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    // preflight: the finest anchors must still be meaningful images
    let min_side = corpus
        .images
        .iter()
        .map(|i| i.pixels.width().min(i.pixels.height()))
        .min()
        .unwrap();
    let max_level = config.max_level();
    if (min_side >> max_level) < 4 {
        return Err(Error::invalid(format!(
            "corpus images of side {min_side} are smaller than required by level {max_level} \
             (anchor side would be {})",
            min_side >> max_level
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = load_checkpoint(ckpt, corpus.len())?;
            if serde_json::to_value(&t.config)? != serde_json::to_value(config)? {
                return Err(Error::invalid(
                    "resume config differs from checkpoint config",
                ));
            }
            t
        }
        None => {
            // fresh run: truncate any stale metrics file
            let _ = std::fs::remove_file(&metrics_path);
            Trainer::new(config.clone(), corpus)?
        }
    };
    let mut metrics_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );

    let total = trainer.schedule.total_steps;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let mut last_epoch_marker = u64::MAX;
    while trainer.state.step < total {
        let step = trainer.state.step;
        let (phase_index, batch) = assemble_batch(corpus, config, &trainer.schedule, step)?;
        let phase = trainer.schedule.plans[phase_index].phase;
        let metrics = trainer.train_step(&batch, &phase)?;
        serde_json::to_writer(&mut metrics_file, &metrics)?;
        metrics_file.write_all(b"\n")?;

        // checkpoint at epoch boundaries per cadence, and at phase ends
        let plan = &trainer.schedule.plans[phase_index];
        let step_in_phase = trainer.state.step - plan.start_step;
        let at_phase_end = trainer.state.step == plan.start_step + plan.steps;
        let at_epoch_end = step_in_phase % plan.steps_per_epoch == 0 && step_in_phase > 0;
        let epoch_marker = plan.start_step + step_in_phase;
        if at_phase_end
            || (at_epoch_end
                && config.checkpoint_every_epochs > 0
                && (step_in_phase / plan.steps_per_epoch) % config.checkpoint_every_epochs as u64
                    == 0
                && epoch_marker != last_epoch_marker)
        {
            metrics_file.flush()?;
            save_checkpoint(&trainer, &ckpt_path)?;
            last_epoch_marker = epoch_marker;
        }
    }
    metrics_file.flush()?;
    save_checkpoint(&trainer, &ckpt_path)?;
    Ok(PretrainReport {
        steps_run: trainer.state.step,
        total_steps: total,
        final_checkpoint: ckpt_path,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_corpus, SceneSpec};

    fn tiny_train_config(seed: u64) -> TrainConfig {
        use crate::model::{EncoderConfig, EncoderKind, HeadConfig, ModelConfig};
        TrainConfig {
            model: ModelConfig {
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
            },
            phases: vec![CurriculumPhase {
                level: 0,
                mode: PhaseMode::Joint,
                epochs: 1,
                batch_size: 4,
            }],
            sampler: SamplerConfig {
                crops_per_anchor: 2,
                crop_size: 16,
                global_size: 32,
                center_jitter: 0.125,
                n_parts: 4,
                part_jitter: 0.2,
                part_size: 32,
            },
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(seed: u64, count: usize) -> Corpus {
        generate_corpus(
            &SceneSpec {
                image_size: 64,
                n_landmark_classes: 4,
                structure_depth: 3,
                noise_level: 0.05,
                seed,
            },
            count,
        )
        .unwrap()
    }

    #[test]
    fn default_schedule_alternates_warmup_joint_per_level() {
        let config = TrainConfig::default();
        let levels: Vec<u32> = config.phases.iter().map(|p| p.level).collect();
        assert_eq!(levels, vec![0, 0, 1, 1, 2, 2]);
        let modes: Vec<PhaseMode> = config.phases.iter().map(|p| p.mode).collect();
        assert_eq!(
            modes,
            vec![
                PhaseMode::Warmup,
                PhaseMode::Joint,
                PhaseMode::Warmup,
                PhaseMode::Joint,
                PhaseMode::Warmup,
                PhaseMode::Joint
            ]
        );
        let schedule = build_schedule(&config, 64).unwrap();
        // 64 images / batch 8 = 8 steps per epoch; (5 + 10) epochs x 3 levels
        assert_eq!(schedule.total_steps, 8 * 15 * 3);
        assert_eq!(schedule.tau_warmup_steps, 8 * 5);
    }

    #[test]
    fn single_phase_schedule() {
        let mut config = TrainConfig::default();
        config.phases = vec![CurriculumPhase {
            level: 0,
            mode: PhaseMode::Joint,
            epochs: 3,
            batch_size: 16,
        }];
        let schedule = build_schedule(&config, 64).unwrap();
        assert_eq!(schedule.plans.len(), 1);
        assert_eq!(schedule.total_steps, 4 * 3);
    }

    #[test]
    fn level_three_accepted() {
        let mut config = TrainConfig::default();
        config.phases.push(CurriculumPhase {
            level: 3,
            mode: PhaseMode::Warmup,
            epochs: 1,
            batch_size: 8,
        });
        config.phases.push(CurriculumPhase {
            level: 3,
            mode: PhaseMode::Joint,
            epochs: 1,
            batch_size: 8,
        });
        assert!(build_schedule(&config, 64).is_ok());
    }

    #[test]
    fn schedule_rejects_bad_orderings() {
        let mut config = TrainConfig::default();
        config.phases = vec![
            CurriculumPhase {
                level: 1,
                mode: PhaseMode::Warmup,
                epochs: 1,
                batch_size: 8,
            },
            CurriculumPhase {
                level: 0,
                mode: PhaseMode::Joint,
                epochs: 1,
                batch_size: 8,
            },
        ];
        assert!(build_schedule(&config, 64).is_err());

        let mut config = TrainConfig::default();
        config.phases = vec![
            CurriculumPhase {
                level: 0,
                mode: PhaseMode::Joint,
                epochs: 1,
                batch_size: 8,
            },
            CurriculumPhase {
                level: 0,
                mode: PhaseMode::Warmup,
                epochs: 1,
                batch_size: 8,
            },
        ];
        assert!(build_schedule(&config, 64).is_err());

        let mut config = TrainConfig::default();
        config.phases.clear();
        assert!(build_schedule(&config, 64).is_err());
    }

    #[test]
    fn warmup_step_reports_exactly_zero_for_masked_branches() {
        let corpus = tiny_corpus(1, 8);
        let mut config = tiny_train_config(1);
        config.phases[0].mode = PhaseMode::Warmup;
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let (_, batch) = assemble_batch(&corpus, &config, &trainer.schedule, 0).unwrap();
        let m = trainer.train_step(&batch, &config.phases[0]).unwrap();
        assert_eq!(m.l_comp, 0.0);
        assert_eq!(m.l_decomp, 0.0);
        assert!(m.l_loc > 0.0);
        assert_eq!(m.weights, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn null_update_leaves_parameters_bit_identical() {
        let corpus = tiny_corpus(2, 8);
        let mut config = tiny_train_config(2);
        config.lr_max = 0.0;
        config.lr_min = 0.0;
        config.ema_start = 1.0;
        config.ema_end = 1.0;
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let student_before = trainer.state.student.clone();
        let teacher_before = trainer.state.teacher.clone();
        let (_, batch) = assemble_batch(&corpus, &config, &trainer.schedule, 0).unwrap();
        trainer.train_step(&batch, &config.phases[0]).unwrap();
        assert_eq!(trainer.state.student, student_before);
        assert_eq!(trainer.state.teacher, teacher_before);
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let corpus = tiny_corpus(3, 8);
        let mut config = tiny_train_config(3);
        // EMA frozen: teacher must stay bit-identical across optimizer steps
        config.ema_start = 1.0;
        config.ema_end = 1.0;
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let teacher_before = trainer.state.teacher.clone();
        let student_before = trainer.state.student.clone();
        for step in 0..2 {
            let (_, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
            trainer.train_step(&batch, &config.phases[0]).unwrap();
        }
        assert_eq!(trainer.state.teacher, teacher_before);
        assert!(trainer.state.student.max_abs_diff(&student_before).unwrap() > 0.0);
    }

    #[test]
    fn metrics_replay_bit_identically() {
        let corpus = tiny_corpus(4, 8);
        let config = tiny_train_config(4);
        let run = |cfg: &TrainConfig| -> Vec<String> {
            let mut t = Trainer::new(cfg.clone(), &corpus).unwrap();
            let mut out = Vec::new();
            for step in 0..t.schedule.total_steps {
                let (pi, batch) = assemble_batch(&corpus, cfg, &t.schedule, step).unwrap();
                let phase = t.schedule.plans[pi].phase;
                let m = t.train_step(&batch, &phase).unwrap();
                out.push(serde_json::to_string(&m).unwrap());
            }
            out
        };
        assert_eq!(run(&config), run(&config));
    }

    #[test]
    fn logged_lambda_reproduces_schedule_formula() {
        let corpus = tiny_corpus(5, 8);
        let config = tiny_train_config(5);
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let total = trainer.schedule.total_steps;
        for step in 0..total {
            let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
            let phase = trainer.schedule.plans[pi].phase;
            let m = trainer.train_step(&batch, &phase).unwrap();
            let expect = ema_coefficient(step, total, config.ema_start, config.ema_end).unwrap();
            assert_eq!(m.ema_lambda, expect);
        }
    }

    #[test]
    fn batch_anchor_sides_follow_scale_law() {
        let corpus = tiny_corpus(6, 8);
        let mut config = tiny_train_config(6);
        config.phases = vec![
            CurriculumPhase {
                level: 1,
                mode: PhaseMode::Joint,
                epochs: 1,
                batch_size: 4,
            },
            CurriculumPhase {
                level: 2,
                mode: PhaseMode::Joint,
                epochs: 1,
                batch_size: 4,
            },
        ];
        let schedule = build_schedule(&config, corpus.len()).unwrap();
        for step in 0..schedule.total_steps {
            let (pi, batch) = assemble_batch(&corpus, &config, &schedule, step).unwrap();
            let level = schedule.plans[pi].phase.level;
            for s in &batch {
                assert_eq!(s.whole.width(), 64 >> level);
            }
        }
    }

    #[test]
    fn pretrain_rejects_undersized_corpus() {
        let corpus = tiny_corpus(7, 4);
        let mut config = tiny_train_config(7);
        config.phases = vec![CurriculumPhase {
            level: 5, // 64 >> 5 = 2 < 4
            mode: PhaseMode::Joint,
            epochs: 1,
            batch_size: 4,
        }];
        let dir = std::env::temp_dir().join("holon_trainer_reject");
        let err = pretrain(&corpus, &config, &dir, None);
        assert!(err.is_err());
    }

    /// 50 joint steps on a small corpus: mean total loss over the last ten
    /// steps must fall strictly below the mean over the first ten.
    #[test]
    fn smoke_training_loss_decreases() {
        let corpus = tiny_corpus(8, 16);
        let mut config = tiny_train_config(8);
        config.phases = vec![CurriculumPhase {
            level: 0,
            mode: PhaseMode::Joint,
            epochs: 13, // 16/4 = 4 steps per epoch -> 52 steps
            batch_size: 4,
        }];
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let mut totals = Vec::new();
        for step in 0..50 {
            let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
            let phase = trainer.schedule.plans[pi].phase;
            let m = trainer.train_step(&batch, &phase).unwrap();
            totals.push(m.total);
        }
        let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = totals[40..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "loss failed to decrease: first10 {head:.4} last10 {tail:.4}"
        );
    }

    #[test]
    fn resume_replays_uninterrupted_run_exactly() {
        let corpus = tiny_corpus(9, 8);
        let mut config = tiny_train_config(9);
        config.phases = vec![CurriculumPhase {
            level: 0,
            mode: PhaseMode::Joint,
            epochs: 3,
            batch_size: 4,
        }];
        let base = std::env::temp_dir().join("holon_trainer_resume");
        let _ = std::fs::remove_dir_all(&base);

        // uninterrupted reference run
        let full_dir = base.join("full");
        pretrain(&corpus, &config, &full_dir, None).unwrap();
        let full_log = std::fs::read_to_string(full_dir.join("metrics.jsonl")).unwrap();

        // interrupted run: stop after 2 steps, checkpoint, resume
        let part_dir = base.join("part");
        std::fs::create_dir_all(&part_dir).unwrap();
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let mut lines = Vec::new();
        for step in 0..2 {
            let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
            let phase = trainer.schedule.plans[pi].phase;
            let m = trainer.train_step(&batch, &phase).unwrap();
            lines.push(serde_json::to_string(&m).unwrap());
        }
        let ckpt = part_dir.join("mid.ckpt");
        save_checkpoint(&trainer, &ckpt).unwrap();
        std::fs::write(
            part_dir.join("metrics.jsonl"),
            lines.join("\n") + "\n",
        )
        .unwrap();
        pretrain(&corpus, &config, &part_dir, Some(&ckpt)).unwrap();
        let resumed_log = std::fs::read_to_string(part_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(full_log, resumed_log);
    }

    #[test]
    fn checkpoint_round_trip_restores_bitwise() {
        let corpus = tiny_corpus(10, 8);
        let config = tiny_train_config(10);
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, 0).unwrap();
        let phase = trainer.schedule.plans[pi].phase;
        trainer.train_step(&batch, &phase).unwrap();

        let path = std::env::temp_dir().join("holon_trainer_ckpt_rt.ckpt");
        save_checkpoint(&trainer, &path).unwrap();
        let back = load_checkpoint(&path, corpus.len()).unwrap();
        assert_eq!(back.state.student, trainer.state.student);
        assert_eq!(back.state.teacher, trainer.state.teacher);
        assert_eq!(back.state.center, trainer.state.center);
        assert_eq!(back.state.step, trainer.state.step);
        assert_eq!(back.opt.t, trainer.opt.t);
        assert_eq!(back.opt.m, trainer.opt.m);
        assert_eq!(back.opt.v, trainer.opt.v);
    }

    #[test]
    fn adamw_skips_decay_on_biases() {
        use crate::nn::Param;
        let mut params = ParamCollection::new();
        params.add(Param {
            name: "l.w".into(),
            shape: vec![1],
            data: vec![1.0],
        });
        params.add(Param {
            name: "l.b".into(),
            shape: vec![1],
            data: vec![1.0],
        });
        let grads = params.zeros_like();
        let mut opt = AdamW::new(&params, 0.1);
        opt.step(&mut params, &grads, 1.0).unwrap();
        // zero gradient: only decay moves the weight, never the bias
        assert!((params.get("l.w").data[0] - 0.9).abs() < 1e-6);
        assert_eq!(params.get("l.b").data[0], 1.0);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let config = TrainConfig::default();
        let schedule = build_schedule(&config, 64).unwrap();
        let w = schedule.lr_warmup_steps;
        assert!(lr_at(&config, &schedule, 0) < config.lr_max / 2.0);
        let peak = lr_at(&config, &schedule, w);
        assert!((peak - config.lr_max).abs() < 1e-9);
        let end = lr_at(&config, &schedule, schedule.total_steps - 1);
        assert!(end < config.lr_max / 10.0);
    }
}
