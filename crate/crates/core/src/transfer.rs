//! Fine-tuning harness on synthetic tasks: binary classification (appended
//! linear head, AUC) and organ-region segmentation (skip-connected
//! encoder-decoder built on the conv encoder, Dice), with few-shot
//! subsetting, multi-seed reporting, and a Welch t-test between runs.
//!
//! Fine-tuning initializes the encoder from a checkpoint's *teacher*
//! parameters (or randomly, for baselines) and trains end-to-end.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{EncoderConfig, ModelState, SmallConv};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d, ConvTranspose2x2, Linear, ParamCollection};
use crate::rng::{stream, Pcg32};
use crate::stats::{auc, dice, mean, std_dev, welch_t_test, TTest};
use crate::synthgen::{organ_mask, Corpus};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn metric_name(&self) -> &'static str {
        match self {
            TaskKind::Classification => "auc",
            TaskKind::Segmentation => "dice",
        }
    }
}

/// A transfer task over a corpus: which images train, which test. Labels and
/// masks are derived analytically from the scene records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferTask {
    pub kind: TaskKind,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl TransferTask {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let n = corpus.len();
        if self.train_indices.is_empty() || self.test_indices.is_empty() {
            return Err(Error::invalid("task needs non-empty train and test sets"));
        }
        for &i in self.train_indices.iter().chain(self.test_indices.iter()) {
            if i >= n {
                return Err(Error::invalid(format!("index {i} outside corpus of {n}")));
            }
        }
        let train_subjects: std::collections::BTreeSet<u32> = self
            .train_indices
            .iter()
            .map(|&i| corpus.images[i].subject_id)
            .collect();
        for &i in &self.test_indices {
            if train_subjects.contains(&corpus.images[i].subject_id) {
                return Err(Error::invalid(format!(
                    "subject {} appears in both train and test",
                    corpus.images[i].subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Subject-disjoint 80/20 split into a classification task (lesion
/// presence) and a segmentation task (organ-region masks).
pub fn make_synthetic_tasks(corpus: &Corpus) -> Result<(TransferTask, TransferTask)> {
    if corpus.len() < 5 {
        return Err(Error::invalid(format!(
            "corpus of {} images is too small for a disjoint 80/20 split",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| corpus.images[i].subject_id);
    let n_test = (corpus.len() / 5).max(1);
    let test_indices: Vec<usize> = order[corpus.len() - n_test..].to_vec();
    let train_indices: Vec<usize> = order[..corpus.len() - n_test].to_vec();
    let cls = TransferTask {
        kind: TaskKind::Classification,
        train_indices: train_indices.clone(),
        test_indices: test_indices.clone(),
    };
    let seg = TransferTask {
        kind: TaskKind::Segmentation,
        train_indices,
        test_indices,
    };
    cls.validate(corpus)?;
    Ok((cls, seg))
}

pub fn classification_label(corpus: &Corpus, index: usize) -> f32 {
    if corpus.scenes[index].lesion {
        1.0
    } else {
        0.0
    }
}

pub fn segmentation_mask(corpus: &Corpus, index: usize) -> Image {
    organ_mask(&corpus.scenes[index], corpus.images[index].pixels.width())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Labeled training examples drawn from the task's train split.
    pub shots: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            shots: 6,
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub schema: u32,
    pub kind: TaskKind,
    pub metric: String,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Welch t-test between two fine-tuning reports (e.g., pretrained vs
/// random-init encoder).
pub fn compare_reports(a: &FinetuneReport, b: &FinetuneReport) -> Result<TTest> {
    welch_t_test(&a.per_seed, &b.per_seed)
}

// ---------------------------------------------------------------------------
// segmentation network: conv encoder + transposed-conv decoder with skips
// ---------------------------------------------------------------------------

/// Decoder mirroring the four encoder stages: at each level a 2x2 stride-2
/// transposed conv doubles resolution, the matching encoder stage output is
/// concatenated, and a 3x3 conv fuses the pair; a final upsample block and a
/// 3x3 head produce one logit per input pixel.
pub struct SegNet {
    pub encoder: SmallConv,
    ups: Vec<ConvTranspose2x2>,
    fuses: Vec<Conv2d>,
    head: Conv2d,
    input_size: usize,
}

struct SegTrace {
    enc: crate::model::SmallConvTrace,
    /// Per decoder level: (input to up, its dims, concat buffer, fuse pre-act).
    levels: Vec<(Vec<f32>, (usize, usize), Vec<f32>, Vec<f32>)>,
    /// Final block: (input to last up, its dims, last up output, fuse pre-act,
    /// fused output).
    final_in: Vec<f32>,
    final_in_dims: (usize, usize),
    final_up: Vec<f32>,
    final_pre: Vec<f32>,
    final_out: Vec<f32>,
}

impl SegNet {
    pub fn new(encoder_cfg: &EncoderConfig) -> Result<SegNet> {
        if encoder_cfg.input_size % 16 != 0 {
            return Err(Error::invalid(format!(
                "segmentation input size {} must be divisible by 16",
                encoder_cfg.input_size
            )));
        }
        let encoder = SmallConv::new(encoder_cfg)?;
        let ch = encoder.stage_channels(); // [d/8, d/4, d/2, d]
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        for (j, k) in [2usize, 1, 0].into_iter().enumerate() {
            let cin = if j == 0 { ch[3] } else { ch[k + 1] };
            ups.push(ConvTranspose2x2::new(format!("decoder.up{j}"), cin, ch[k]));
            fuses.push(Conv2d::new(format!("decoder.fuse{j}"), 2 * ch[k], ch[k], 1));
        }
        ups.push(ConvTranspose2x2::new("decoder.up3", ch[0], ch[0]));
        fuses.push(Conv2d::new("decoder.fuse3", ch[0], ch[0], 1));
        let head = Conv2d::new("decoder.head", ch[0], 1, 1);
        Ok(SegNet {
            encoder,
            ups,
            fuses,
            head,
            input_size: encoder_cfg.input_size,
        })
    }

    pub fn init_decoder(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        for up in &self.ups {
            up.init(params, rng);
        }
        for fuse in &self.fuses {
            fuse.init(params, rng);
        }
        self.head.init(params, rng);
    }

    fn forward_trace(&self, params: &ParamCollection, img: &Image) -> Result<(Vec<f32>, SegTrace)> {
        if img.width() != self.input_size || img.height() != self.input_size {
            return Err(Error::shape(format!(
                "segmentation input must be {0}x{0}",
                self.input_size
            )));
        }
        let enc = self.encoder.forward_full(params, img)?;
        let mut x = enc.outs[3].clone();
        let mut dims = enc.dims[4];
        let mut levels = Vec::with_capacity(3);
        for (j, k) in [2usize, 1, 0].into_iter().enumerate() {
            let up_in = x.clone();
            let up_in_dims = dims;
            let u = self.ups[j].forward(params, &x, dims.0, dims.1);
            let skip = &enc.outs[k];
            let mut cat = u;
            cat.extend_from_slice(skip);
            let (sh, sw) = enc.dims[k + 1];
            let pre = self.fuses[j].forward(params, &cat, sh, sw);
            x = leaky_relu(&pre);
            dims = (sh, sw);
            levels.push((up_in, up_in_dims, cat, pre));
        }
        let final_in = x.clone();
        let final_in_dims = dims;
        let u = self.ups[3].forward(params, &x, dims.0, dims.1);
        let (fh, fw) = (dims.0 * 2, dims.1 * 2);
        let pre = self.fuses[3].forward(params, &u, fh, fw);
        let fused = leaky_relu(&pre);
        let logits = self.head.forward(params, &fused, fh, fw);
        Ok((
            logits,
            SegTrace {
                enc,
                levels,
                final_in,
                final_in_dims,
                final_up: u,
                final_pre: pre,
                final_out: fused,
            },
        ))
    }

    /// Inference-only forward: per-pixel logits at input resolution.
    pub fn forward(&self, params: &ParamCollection, img: &Image) -> Result<Vec<f32>> {
        Ok(self.forward_trace(params, img)?.0)
    }

    fn backward(
        &self,
        params: &ParamCollection,
        trace: &SegTrace,
        g_logits: &[f32],
        grads: &mut ParamCollection,
    ) {
        let n = self.input_size;
        let mut g = self
            .head
            .backward(params, &trace.final_out, n, n, g_logits, grads);
        g = leaky_relu_backward(&trace.final_pre, &g);
        g = self.fuses[3].backward(params, &trace.final_up, n, n, &g, grads);
        g = self.ups[3].backward(
            params,
            &trace.final_in,
            trace.final_in_dims.0,
            trace.final_in_dims.1,
            &g,
            grads,
        );

        let ch = self.encoder.stage_channels();
        let mut skip_grads: Vec<Vec<f32>> = trace
            .enc
            .outs
            .iter()
            .map(|o| vec![0.0f32; o.len()])
            .collect();
        for (j, k) in [2usize, 1, 0].into_iter().enumerate().rev() {
            let (up_in, up_in_dims, cat, pre) = &trace.levels[j];
            let g_pre = leaky_relu_backward(pre, &g);
            let (sh, sw) = trace.enc.dims[k + 1];
            let g_cat = self.fuses[j].backward(params, cat, sh, sw, &g_pre, grads);
            let split = ch[k] * sh * sw;
            for (dst, src) in skip_grads[k].iter_mut().zip(&g_cat[split..]) {
                *dst += *src;
            }
            g = self.ups[j].backward(
                params,
                up_in,
                up_in_dims.0,
                up_in_dims.1,
                &g_cat[..split],
                grads,
            );
        }
        // g now targets the deepest encoder stage output
        for (dst, src) in skip_grads[3].iter_mut().zip(&g) {
            *dst += *src;
        }
        self.encoder
            .backward_full(params, &trace.enc, None, Some(&skip_grads), grads);
    }
}

/// Numerically stable binary cross-entropy with logits; returns the mean
/// loss and per-logit gradients `sigmoid(z) - y`.
fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets.iter()) {
        let z64 = z as f64;
        loss += z64.max(0.0) - z64 * y as f64 + (1.0 + (-z64.abs()).exp()).ln();
        let sig = 1.0 / (1.0 + (-z64).exp());
        grad.push(((sig - y as f64) / n) as f32);
    }
    (loss / n, grad)
}

/// Fine-tune on a task and report the test metric. `init` supplies
/// pretrained encoder parameters (the checkpoint's teacher); `None` trains
/// from random initialization. Runs once per seed in `config.seeds`.
pub fn finetune(
    encoder_cfg: &EncoderConfig,
    init: Option<&ModelState>,
    corpus: &Corpus,
    task: &TransferTask,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    task.validate(corpus)?;
    if config.shots == 0 || config.shots > task.train_indices.len() {
        return Err(Error::invalid(format!(
            "shots {} outside 1..={} available training labels",
            config.shots,
            task.train_indices.len()
        )));
    }
    if config.seeds.is_empty() {
        return Err(Error::invalid("at least one seed required"));
    }
    if let Some(state) = init {
        if state.config.encoder != *encoder_cfg {
            return Err(Error::invalid(
                "checkpoint encoder config does not match the task encoder config",
            ));
        }
    }
    let input = encoder_cfg.input_size;
    for &i in task.train_indices.iter().chain(task.test_indices.iter()) {
        let img = &corpus.images[i].pixels;
        if img.width() != input || img.height() != input {
            return Err(Error::invalid(format!(
                "image {} is {}x{}, task expects {input}x{input}",
                i,
                img.width(),
                img.height()
            )));
        }
    }

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let value = match task.kind {
            TaskKind::Classification => {
                finetune_classification(encoder_cfg, init, corpus, task, config, seed)?
            }
            TaskKind::Segmentation => {
                finetune_segmentation(encoder_cfg, init, corpus, task, config, seed)?
            }
        };
        per_seed.push(value);
    }
    Ok(FinetuneReport {
        schema: crate::SCHEMA_VERSION,
        kind: task.kind,
        metric: task.kind.metric_name().to_string(),
        shots: config.shots,
        seeds: config.seeds.clone(),
        per_seed: per_seed.clone(),
        mean: mean(&per_seed),
        std: std_dev(&per_seed),
    })
}

fn encoder_init_params(
    encoder: &SmallConv,
    init: Option<&ModelState>,
    rng: &mut Pcg32,
) -> ParamCollection {
    use crate::model::Backbone;
    match init {
        Some(state) => state.teacher.subset_by_prefix("encoder."),
        None => {
            let mut p = ParamCollection::new();
            encoder.init_params(&mut p, rng);
            p
        }
    }
}

fn select_shots(task: &TransferTask, shots: usize, rng: &mut Pcg32) -> Vec<usize> {
    let mut pool = task.train_indices.clone();
    rng.shuffle(&mut pool);
    pool.truncate(shots);
    pool
}

fn finetune_classification(
    encoder_cfg: &EncoderConfig,
    init: Option<&ModelState>,
    corpus: &Corpus,
    task: &TransferTask,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    use crate::model::Backbone;
    let encoder = SmallConv::new(encoder_cfg)?;
    let d = encoder_cfg.feature_dim;
    let head = Linear::new("cls.fc", d, 1);
    let mut rng = Pcg32::from_coords(seed, &[stream::TRANSFER, 1]);
    let mut params = encoder_init_params(&encoder, init, &mut rng);
    head.init(&mut params, &mut rng);
    let mut opt = crate::trainer::AdamW::new(&params, config.weight_decay);

    let shot_set = select_shots(task, config.shots, &mut rng);
    for epoch in 0..config.epochs {
        let mut order = shot_set.clone();
        let mut erng = Pcg32::from_coords(seed, &[stream::TRANSFER, 2, epoch as u64]);
        erng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &idx in chunk {
                let img = &corpus.images[idx].pixels;
                let (feat, trace) = encoder.forward_train(&params, img)?;
                let logit = head.forward(&params, &feat);
                let y = classification_label(corpus, idx);
                let (_, g) = bce_with_logits(&logit, &[y]);
                let scaled: Vec<f32> = g.iter().map(|&v| v / chunk.len() as f32).collect();
                let g_feat = head.backward(&params, &feat, &scaled, &mut grads);
                encoder.backward(&params, &trace, &g_feat, &mut grads);
            }
            opt.step(&mut params, &grads, config.lr)?;
        }
    }

    let mut scores = Vec::with_capacity(task.test_indices.len());
    let mut labels = Vec::with_capacity(task.test_indices.len());
    for &idx in &task.test_indices {
        let feat = encoder.forward(&params, &corpus.images[idx].pixels)?;
        let logit = head.forward(&params, &feat);
        scores.push(logit[0] as f64);
        labels.push(classification_label(corpus, idx) > 0.5);
    }
    auc(&scores, &labels)
}

fn finetune_segmentation(
    encoder_cfg: &EncoderConfig,
    init: Option<&ModelState>,
    corpus: &Corpus,
    task: &TransferTask,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    let net = SegNet::new(encoder_cfg)?;
    let mut rng = Pcg32::from_coords(seed, &[stream::TRANSFER, 3]);
    let mut params = encoder_init_params(&net.encoder, init, &mut rng);
    net.init_decoder(&mut params, &mut rng);
    let mut opt = crate::trainer::AdamW::new(&params, config.weight_decay);

    let shot_set = select_shots(task, config.shots, &mut rng);
    let masks: Vec<(usize, Image)> = shot_set
        .iter()
        .map(|&idx| (idx, segmentation_mask(corpus, idx)))
        .collect();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..masks.len()).collect();
        let mut erng = Pcg32::from_coords(seed, &[stream::TRANSFER, 4, epoch as u64]);
        erng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &mi in chunk {
                let (idx, mask) = &masks[mi];
                let img = &corpus.images[*idx].pixels;
                let (logits, trace) = net.forward_trace(&params, img)?;
                let (_, g) = bce_with_logits(&logits, mask.data());
                let scaled: Vec<f32> = g.iter().map(|&v| v / chunk.len() as f32).collect();
                net.backward(&params, &trace, &scaled, &mut grads);
            }
            opt.step(&mut params, &grads, config.lr)?;
        }
    }

    let mut dices = Vec::with_capacity(task.test_indices.len());
    for &idx in &task.test_indices {
        let logits = net.forward(&params, &corpus.images[idx].pixels)?;
        let pred: Vec<f32> = logits
            .iter()
            .map(|&z| if z >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        let truth = segmentation_mask(corpus, idx);
        dices.push(dice(&pred, truth.data())?);
    }
    Ok(mean(&dices))
}
