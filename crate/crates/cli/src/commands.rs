//! Subcommand implementations. Each command writes a run manifest into its
//! output directory, produces schema-versioned JSON metrics (deterministic:
//! no timestamps or absolute paths inside metrics files), and emits plot
//! images alongside.

use crate::manifest::RunManifest;
use crate::{
    ComposeArgs, InterpArgs, LocalizeArgs, MatchArgs, PretrainArgs, ReportArgs, SynthgenArgs,
    TransferArgs,
};
use anyhow::{bail, Context, Result};
use holon::model::ModelState;
use holon::stats::TTest;
use holon::synthgen::SceneSpec;
use holon::trainer::TrainConfig;
use holon::transfer::{FinetuneConfig, FinetuneReport, TaskKind};
use holon::zeroshot;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn synthgen(args: SynthgenArgs) -> Result<()> {
    let spec = SceneSpec {
        image_size: args.size,
        n_landmark_classes: args.classes,
        structure_depth: args.depth,
        noise_level: args.noise,
        seed: args.seed,
    };
    let (manifest, mpath) = RunManifest::start(
        &args.out,
        "synthgen",
        serde_json::json!({"spec": spec, "count": args.count}),
        Some(args.seed),
    )?;
    let corpus = holon::synthgen::generate_corpus(&spec, args.count)?;
    holon::synthgen::save_corpus(&corpus, &args.out)?;
    let mut artifacts = vec![args.out.join("manifest.json")];
    for img in &corpus.images {
        artifacts.push(args.out.join(format!("img_{:05}.png", img.subject_id)));
    }
    manifest.finish(&mpath, &artifacts)?;
    println!(
        "wrote {} images ({}x{}, {} classes) to {}",
        args.count,
        args.size,
        args.size,
        args.classes,
        args.out.display()
    );
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?);
        return Ok(());
    }
    let corpus_dir = args.corpus.expect("clap enforces --corpus");
    let out = args.out.expect("clap enforces --out");
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let corpus = holon::synthgen::load_corpus(&corpus_dir)?;
    let (manifest, mpath) = RunManifest::start(
        &out,
        "pretrain",
        serde_json::to_value(&config)?,
        Some(config.seed),
    )?;
    let report = holon::trainer::pretrain(&corpus, &config, &out, args.resume.as_deref())?;
    manifest.finish(&mpath, &[report.metrics_path.clone(), report.final_checkpoint.clone()])?;
    println!(
        "trained {} steps; checkpoint at {}",
        report.steps_run,
        report.final_checkpoint.display()
    );
    Ok(())
}

fn load_eval_inputs(
    ckpt: &Path,
    corpus_dir: &Path,
) -> Result<(holon::model::Model, ModelState, holon::synthgen::Corpus)> {
    let (model, state) = holon::trainer::load_model_state(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let corpus = holon::synthgen::load_corpus(corpus_dir)
        .with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    Ok((model, state, corpus))
}

pub fn eval_localize(args: LocalizeArgs) -> Result<()> {
    let (model, state, corpus) = load_eval_inputs(&args.common.ckpt, &args.common.corpus)?;
    let (manifest, mpath) = RunManifest::start(
        &args.common.out,
        "eval-localize",
        serde_json::json!({"patch": args.patch, "levels": args.levels, "normalize": !args.no_normalize}),
        None,
    )?;
    let set = zeroshot::extract_landmark_embeddings(&model, &state, &corpus, args.patch, &args.levels)?;
    let report = zeroshot::intra_cluster_stats(&set, !args.no_normalize)?;

    let json_path = args.common.out.join("localize.json");
    write_json(&json_path, &report)?;

    let groups: Vec<(String, Vec<f64>)> = report
        .per_class
        .iter()
        .map(|c| (format!("C{}", c.class_id), c.values.clone()))
        .collect();
    let box_path = args.common.out.join("localize_box.png");
    holon::plot::boxplot(&box_path, "intra-class distance per landmark", &groups)?;

    // 2-D projection of the level-1 embeddings, class-colored
    let level1: Vec<&zeroshot::LandmarkEmbedding> =
        set.entries.iter().filter(|e| e.level == args.levels[0]).collect();
    let data: Vec<Vec<f32>> = level1.iter().map(|e| e.embedding.clone()).collect();
    use zeroshot::Reducer;
    let proj = zeroshot::PcaReducer::default().reduce(&data);
    let points: Vec<(f64, f64, u32)> = proj
        .iter()
        .zip(level1.iter())
        .map(|(p, e)| (p[0], p[1], e.class_id))
        .collect();
    let scatter_path = args.common.out.join("localize_projection.png");
    holon::plot::scatter(&scatter_path, "landmark embedding projection (pca)", &points)?;

    manifest.finish(&mpath, &[json_path, box_path, scatter_path])?;
    println!(
        "silhouette {:.4} over {} classes{}",
        report.silhouette,
        report.per_class.len(),
        if report.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

pub fn eval_compose(args: ComposeArgs) -> Result<()> {
    let (model, state, corpus) = load_eval_inputs(&args.common.ckpt, &args.common.corpus)?;
    let (manifest, mpath) = RunManifest::start(
        &args.common.out,
        "eval-compose",
        serde_json::json!({"trials": args.trials, "parts": args.parts, "seed": args.seed}),
        Some(args.seed),
    )?;
    let report = zeroshot::composition_similarity(
        &model, &state, &corpus, &args.parts, args.trials, args.seed,
    )?;
    let json_path = args.common.out.join("compose.json");
    write_json(&json_path, &report)?;
    let groups: Vec<(String, Vec<f64>)> = report
        .groups
        .iter()
        .map(|g| (g.grouping.clone(), g.values.clone()))
        .collect();
    let box_path = args.common.out.join("compose_box.png");
    holon::plot::boxplot(&box_path, "whole vs aggregated parts cosine", &groups)?;
    manifest.finish(&mpath, &[json_path, box_path])?;
    for g in &report.groups {
        println!("{}: median {:.4}", g.grouping, g.summary.median);
    }
    Ok(())
}

pub fn eval_interp(args: InterpArgs) -> Result<()> {
    let (model, state, corpus) = load_eval_inputs(&args.common.ckpt, &args.common.corpus)?;
    let (manifest, mpath) = RunManifest::start(
        &args.common.out,
        "eval-interp",
        serde_json::json!({
            "trials": args.trials, "t": args.t_values,
            "patch": args.patch, "seed": args.seed
        }),
        Some(args.seed),
    )?;
    let report = zeroshot::interpolate_extrapolate(
        &model,
        &state,
        &corpus,
        &args.t_values,
        args.trials,
        args.patch,
        args.seed,
    )?;
    let json_path = args.common.out.join("interp.json");
    write_json(&json_path, &report)?;
    let groups: Vec<(String, Vec<f64>)> = report
        .groups
        .iter()
        .map(|g| (g.grouping.clone(), g.values.clone()))
        .collect();
    let box_path = args.common.out.join("interp_box.png");
    holon::plot::boxplot(&box_path, "predicted vs true embedding cosine", &groups)?;
    manifest.finish(&mpath, &[json_path, box_path])?;
    for g in &report.groups {
        println!("{}: median {:.4}", g.grouping, g.summary.median);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchOutput {
    schema: u32,
    window: usize,
    stride: usize,
    query_index: usize,
    key_index: usize,
    tolerance: f64,
    within_tolerance_frac: Option<f64>,
    matches: Vec<zeroshot::LandmarkMatch>,
}

pub fn eval_match(args: MatchArgs) -> Result<()> {
    let (model, state, corpus) = load_eval_inputs(&args.common.ckpt, &args.common.corpus)?;
    if args.query >= corpus.len() || args.key >= corpus.len() {
        bail!(
            "query/key indices ({}, {}) outside corpus of {}",
            args.query,
            args.key,
            corpus.len()
        );
    }
    let (manifest, mpath) = RunManifest::start(
        &args.common.out,
        "eval-match",
        serde_json::json!({
            "query": args.query, "key": args.key,
            "window": args.window, "stride": args.stride
        }),
        None,
    )?;
    let query = &corpus.images[args.query];
    let key = &corpus.images[args.key];
    let matches = zeroshot::match_landmarks(
        &model,
        &state,
        query,
        &key.pixels,
        None,
        args.window,
        args.stride,
    )?;
    let tolerance = args.window as f64 / 2.0 + args.stride as f64;
    let within = zeroshot::match_accuracy(&matches, key, tolerance);
    let output = MatchOutput {
        schema: holon::SCHEMA_VERSION,
        window: args.window,
        stride: args.stride,
        query_index: args.query,
        key_index: args.key,
        tolerance,
        within_tolerance_frac: within,
        matches,
    };
    let json_path = args.common.out.join("match.json");
    write_json(&json_path, &output)?;
    manifest.finish(&mpath, &[json_path])?;
    if let Some(frac) = within {
        println!("{:.0}% of landmarks matched within {tolerance:.1} px", frac * 100.0);
    } else {
        println!("matched {} points (key has no ground truth)", output.matches.len());
    }
    Ok(())
}

/// Task descriptor consumed by `transfer --task`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub schema: u32,
    pub kind: TaskKind,
    pub corpus: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferOutput {
    schema: u32,
    task: TaskKind,
    metric: String,
    shots: usize,
    pretrained: FinetuneReport,
    baseline: Option<FinetuneReport>,
    baseline_kind: Option<String>,
    t_test: Option<TTest>,
}

pub fn transfer(args: TransferArgs) -> Result<()> {
    let task_file: TaskFile = serde_json::from_slice(
        &std::fs::read(&args.task).with_context(|| format!("reading {}", args.task.display()))?,
    )
    .with_context(|| format!("parsing task file {}", args.task.display()))?;
    let corpus = holon::synthgen::load_corpus(&task_file.corpus)?;
    let (cls, seg) = holon::transfer::make_synthetic_tasks(&corpus)?;
    let task = match task_file.kind {
        TaskKind::Classification => cls,
        TaskKind::Segmentation => seg,
    };
    let (_, state) = holon::trainer::load_model_state(&args.ckpt)?;
    let encoder_cfg = state.config.encoder;
    let config = FinetuneConfig {
        shots: args.shots,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: 1e-4,
        seeds: args.seeds.clone(),
    };
    let (manifest, mpath) = RunManifest::start(
        &args.out,
        "transfer",
        serde_json::json!({"task": task_file.kind, "config": config}),
        None,
    )?;
    let pretrained =
        holon::transfer::finetune(&encoder_cfg, Some(&state), &corpus, &task, &config)?;

    let (baseline, baseline_kind) = match &args.baseline_ckpt {
        None => (None, None),
        Some(spec) if spec == "random" => {
            let report =
                holon::transfer::finetune(&encoder_cfg, None, &corpus, &task, &config)?;
            (Some(report), Some("random".to_string()))
        }
        Some(path) => {
            let (_, base_state) = holon::trainer::load_model_state(Path::new(path))?;
            let report = holon::transfer::finetune(
                &encoder_cfg,
                Some(&base_state),
                &corpus,
                &task,
                &config,
            )?;
            (Some(report), Some(path.clone()))
        }
    };
    let t_test = baseline
        .as_ref()
        .map(|b| holon::transfer::compare_reports(&pretrained, b))
        .transpose()?;

    let output = TransferOutput {
        schema: holon::SCHEMA_VERSION,
        task: task_file.kind,
        metric: task_file.kind.metric_name().to_string(),
        shots: args.shots,
        pretrained,
        baseline,
        baseline_kind,
        t_test,
    };
    let json_path = args.out.join("transfer.json");
    write_json(&json_path, &output)?;
    manifest.finish(&mpath, &[json_path])?;
    println!(
        "{} {}: mean {:.4} +/- {:.4}{}",
        output.task.metric_name(),
        output.shots,
        output.pretrained.mean,
        output.pretrained.std,
        match (&output.baseline, &output.t_test) {
            (Some(b), Some(t)) => format!(
                " | baseline {:.4} +/- {:.4}, p = {:.4}",
                b.mean, b.std, t.p_two_sided
            ),
            _ => String::new(),
        }
    );
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<()> {
    let run = &args.run;
    let out = args.out.clone().unwrap_or_else(|| run.join("report.md"));
    let mut md = String::from("# Run report\n\n");

    if let Ok(bytes) = std::fs::read(run.join("run_manifest.json")) {
        if let Ok(m) = serde_json::from_slice::<RunManifest>(&bytes) {
            md.push_str(&format!(
                "- command: `{}`\n- version: {}\n- platform: {}-{}\n\n",
                m.command, m.version, m.platform.os, m.platform.arch
            ));
        }
    }

    let mut sections = 0;
    if let Ok(bytes) = std::fs::read(run.join("metrics.jsonl")) {
        let lines: Vec<&str> = std::str::from_utf8(&bytes)?.lines().collect();
        if let (Some(first), Some(last)) = (lines.first(), lines.last()) {
            let f: holon::trainer::StepMetrics = serde_json::from_str(first)?;
            let l: holon::trainer::StepMetrics = serde_json::from_str(last)?;
            md.push_str("## Training\n\n");
            md.push_str(&format!(
                "- steps: {}\n- total loss: {:.4} -> {:.4}\n- final teacher entropy: {:.4} nats\n\n",
                lines.len(),
                f.total,
                l.total,
                l.teacher_entropy
            ));
            sections += 1;
        }
    }

    if let Ok(bytes) = std::fs::read(run.join("localize.json")) {
        let r: zeroshot::IntraClusterReport = serde_json::from_slice(&bytes)?;
        md.push_str("## Localizability\n\n");
        md.push_str(&format!(
            "- silhouette: {:.4}{}\n- classes: {}\n",
            r.silhouette,
            if r.degenerate { " (degenerate)" } else { "" },
            r.per_class.len()
        ));
        for cl in &r.cross_level {
            md.push_str(&format!(
                "- mean level {}-{} distance: {:.4}\n",
                cl.level_a, cl.level_b, cl.mean_distance
            ));
        }
        md.push_str("\n![intra-class distances](localize_box.png)\n\n");
        md.push_str("![projection](localize_projection.png)\n\n");
        sections += 1;
    }

    if let Ok(bytes) = std::fs::read(run.join("compose.json")) {
        let r: zeroshot::ComposeReport = serde_json::from_slice(&bytes)?;
        md.push_str("## Composition similarity\n\n");
        for g in &r.groups {
            md.push_str(&format!("- {}: median {:.4}\n", g.grouping, g.summary.median));
        }
        md.push_str("\n![composition](compose_box.png)\n\n");
        sections += 1;
    }

    if let Ok(bytes) = std::fs::read(run.join("interp.json")) {
        let r: zeroshot::InterpReport = serde_json::from_slice(&bytes)?;
        md.push_str("## Interpolation / extrapolation\n\n");
        for g in &r.groups {
            md.push_str(&format!("- {}: median {:.4}\n", g.grouping, g.summary.median));
        }
        md.push_str("\n![interp](interp_box.png)\n\n");
        sections += 1;
    }

    if let Ok(bytes) = std::fs::read(run.join("match.json")) {
        let r: MatchOutput = serde_json::from_slice(&bytes)?;
        md.push_str("## Landmark matching\n\n");
        md.push_str(&format!(
            "- window {} stride {}\n- matches: {}\n",
            r.window,
            r.stride,
            r.matches.len()
        ));
        if let Some(f) = r.within_tolerance_frac {
            md.push_str(&format!(
                "- within {:.1} px of ground truth: {:.0}%\n",
                r.tolerance,
                f * 100.0
            ));
        }
        md.push('\n');
        sections += 1;
    }

    if let Ok(bytes) = std::fs::read(run.join("transfer.json")) {
        let r: TransferOutput = serde_json::from_slice(&bytes)?;
        md.push_str("## Transfer\n\n");
        md.push_str(&format!(
            "- task: {:?} ({} shots)\n- pretrained {}: {:.4} +/- {:.4}\n",
            r.task, r.shots, r.metric, r.pretrained.mean, r.pretrained.std
        ));
        if let (Some(b), Some(t)) = (&r.baseline, &r.t_test) {
            md.push_str(&format!(
                "- baseline ({}): {:.4} +/- {:.4}\n- t = {:.3}, df = {:.2}, p = {:.4}\n",
                r.baseline_kind.as_deref().unwrap_or("?"),
                b.mean,
                b.std,
                t.t,
                t.df,
                t.p_two_sided
            ));
        }
        md.push('\n');
        sections += 1;
    }

    if sections == 0 {
        bail!("no recognized outputs found in {}", run.display());
    }
    std::fs::write(&out, md)?;
    println!("wrote {}", out.display());
    Ok(())
}
