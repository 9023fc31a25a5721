//! Hyperparameter probe: short runs printing loss/entropy curves, plus a
//! full-curriculum mode that scores the zero-shot battery against a
//! random-init model.

use holon::losses::TemperaturePair;
use holon::model::ModelState;
use holon::stats::median;
use holon::synthgen::{generate_corpus, SceneSpec};
use holon::trainer::{assemble_batch, CurriculumPhase, PhaseMode, TrainConfig, Trainer};
use holon::zeroshot;

fn desk_corpus(seed: u64) -> holon::synthgen::Corpus {
    generate_corpus(
        &SceneSpec {
            image_size: 64,
            n_landmark_classes: 10,
            structure_depth: 3,
            noise_level: 0.05,
            seed,
        },
        64,
    )
    .unwrap()
}

fn run_short(name: &str, mutate: impl Fn(&mut TrainConfig)) {
    let corpus = desk_corpus(0);
    let mut config = TrainConfig::default();
    config.phases = vec![
        CurriculumPhase { level: 0, mode: PhaseMode::Warmup, epochs: 5, batch_size: 8 },
        CurriculumPhase { level: 0, mode: PhaseMode::Joint, epochs: 10, batch_size: 8 },
    ];
    mutate(&mut config);
    let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
    let total = trainer.schedule.total_steps;
    let mut locs = Vec::new();
    let mut ents = Vec::new();
    for step in 0..total {
        let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
        let phase = trainer.schedule.plans[pi].phase;
        let m = trainer.train_step(&batch, &phase).unwrap();
        locs.push(m.l_loc);
        ents.push(m.teacher_entropy);
    }
    let probe = |v: &[f64], at: f64| v[((v.len() - 1) as f64 * at) as usize];
    let gap = |at: f64| probe(&locs, at) - probe(&ents, at);
    println!(
        "{name:<28} ent: {:.2} {:.2} {:.2} {:.2} {:.2} | kl-gap: {:.3} {:.3} {:.3} {:.3} {:.3}",
        probe(&ents, 0.0), probe(&ents, 0.25), probe(&ents, 0.5), probe(&ents, 0.75), probe(&ents, 1.0),
        gap(0.0), gap(0.25), gap(0.5), gap(0.75), gap(1.0),
    );
}

fn zeroshot_battery(name: &str, seed: u64, mutate: impl Fn(&mut TrainConfig)) {
    let corpus = desk_corpus(0);
    let mut config = TrainConfig::default();
    config.seed = seed;
    mutate(&mut config);
    let started = std::time::Instant::now();
    let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
    let total = trainer.schedule.total_steps;
    let mut min_ent = f64::INFINITY;
    let mut first: Vec<f64> = Vec::new();
    let mut last: Vec<f64> = Vec::new();
    let joint_total: u64 = trainer
        .schedule
        .plans
        .iter()
        .filter(|p| p.phase.mode == PhaseMode::Joint)
        .map(|p| p.steps)
        .sum();
    let mut joint_seen = 0u64;
    for step in 0..total {
        let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
        let phase = trainer.schedule.plans[pi].phase;
        let m = trainer.train_step(&batch, &phase).unwrap();
        min_ent = min_ent.min(m.teacher_entropy);
        if phase.mode == PhaseMode::Joint {
            if joint_seen < joint_total / 5 {
                first.push(m.total);
            }
            if joint_seen >= joint_total - joint_total / 5 {
                last.push(m.total);
            }
            joint_seen += 1;
        }
    }
    let train_secs = started.elapsed().as_secs_f64();
    let trained = trainer.state;
    let model = trainer.model;
    let random = ModelState::init(&model, seed);

    let sil = |state: &ModelState| {
        let set =
            zeroshot::extract_landmark_embeddings(&model, state, &corpus, 24, &[1, 2]).unwrap();
        zeroshot::intra_cluster_stats(&set, true).unwrap()
    };
    let rt = sil(&trained);
    let rr = sil(&random);
    let lower = rt
        .per_class
        .iter()
        .zip(rr.per_class.iter())
        .filter(|(a, b)| a.summary.median < b.summary.median)
        .count();

    let comp = |state: &ModelState| -> Vec<f64> {
        zeroshot::composition_similarity(&model, state, &corpus, &[2, 3, 4], 50, 7)
            .unwrap()
            .groups
            .iter()
            .map(|g| g.summary.median)
            .collect()
    };
    let ct = comp(&trained);
    let cr = comp(&random);

    let interp = |state: &ModelState| -> Vec<f64> {
        zeroshot::interpolate_extrapolate(&model, state, &corpus, &[0.5], 50, 24, 7)
            .unwrap()
            .groups
            .iter()
            .map(|g| g.summary.median)
            .collect()
    };
    let it = interp(&trained);
    let ir = interp(&random);

    let matches = zeroshot::match_landmarks(
        &model,
        &trained,
        &corpus.images[0],
        &corpus.images[0].pixels,
        None,
        24,
        4,
    )
    .unwrap();
    let acc = zeroshot::match_accuracy(&matches, &corpus.images[0], 12.0 + 4.0).unwrap();

    println!("{name} (seed {seed}, {train_secs:.0}s train)");
    println!(
        "  loss first/last20%: {:.3} -> {:.3} | min entropy {:.2} (floor 0.69)",
        median(&first),
        median(&last),
        min_ent
    );
    println!(
        "  silhouette trained {:.3} vs random {:.3} | per-class lower {}/{}",
        rt.silhouette,
        rr.silhouette,
        lower,
        rt.per_class.len()
    );
    println!("  compose medians trained {ct:.3?} vs random {cr:.3?}");
    println!("  interp/extrap t=0.5 trained {it:.3?} vs random {ir:.3?}");
    println!("  match within-tol (key=query): {:.0}%", acc * 100.0);
}

/// Teacher-logit variance across subjects (identity signal) vs across
/// augmented views of one anchor (noise), per curriculum level.
fn probe_snr() {
    use holon::data::{augment, sample_anchor};
    use holon::rng::Pcg32;
    let corpus = desk_corpus(0);
    let config = TrainConfig::default();
    let trainer = Trainer::new(config.clone(), &corpus).unwrap();
    let model = &trainer.model;
    let state = &trainer.state;
    for level in 0..=2u32 {
        let mut per_anchor_means: Vec<Vec<f64>> = Vec::new();
        let mut noise_vars = Vec::new();
        for (i, img) in corpus.images.iter().take(16).enumerate() {
            let mut arng = Pcg32::new(1000 + i as u64, 1);
            let whole = sample_anchor(&img.pixels, level, &mut arng).unwrap();
            let g = config.sampler.global_size;
            let global = whole.resize_bilinear(g, g);
            // several augmented views of the same anchor
            let mut logits_set: Vec<Vec<f64>> = Vec::new();
            for v in 0..6 {
                let mut vrng = Pcg32::new(2000 + i as u64, v);
                let view = augment(&global, &config.augment, &mut vrng);
                let feat = model.encode(&state.teacher, &view).unwrap();
                let z = model.loc_project(&state.teacher, &feat).unwrap();
                logits_set.push(z.iter().map(|&x| x as f64).collect());
            }
            let k = logits_set[0].len();
            let mean: Vec<f64> = (0..k)
                .map(|j| logits_set.iter().map(|z| z[j]).sum::<f64>() / logits_set.len() as f64)
                .collect();
            let var: f64 = logits_set
                .iter()
                .map(|z| {
                    z.iter()
                        .zip(&mean)
                        .map(|(a, m)| (a - m) * (a - m))
                        .sum::<f64>()
                        / k as f64
                })
                .sum::<f64>()
                / logits_set.len() as f64;
            noise_vars.push(var);
            per_anchor_means.push(mean);
        }
        let k = per_anchor_means[0].len();
        let grand: Vec<f64> = (0..k)
            .map(|j| per_anchor_means.iter().map(|m| m[j]).sum::<f64>() / per_anchor_means.len() as f64)
            .collect();
        let signal_var: f64 = per_anchor_means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(&grand)
                    .map(|(a, g)| (a - g) * (a - g))
                    .sum::<f64>()
                    / k as f64
            })
            .sum::<f64>()
            / per_anchor_means.len() as f64;
        let noise: f64 = noise_vars.iter().sum::<f64>() / noise_vars.len() as f64;
        println!(
            "level {level}: identity logit var {signal_var:.5}, view-noise var {noise:.5}, snr {:.3}",
            signal_var / noise.max(1e-12)
        );
    }
}

/// Relative variation of encoder features across subjects at init.
fn probe_feature_spread() {
    use holon::data::sample_anchor;
    use holon::rng::Pcg32;
    let corpus = desk_corpus(0);
    let config = TrainConfig::default();
    let trainer = Trainer::new(config, &corpus).unwrap();
    let model = &trainer.model;
    let state = &trainer.state;
    for level in 0..=2u32 {
        let mut feats: Vec<Vec<f64>> = Vec::new();
        for (i, img) in corpus.images.iter().take(16).enumerate() {
            let mut arng = Pcg32::new(500 + i as u64, 2);
            let whole = sample_anchor(&img.pixels, level, &mut arng).unwrap();
            let view = whole.resize_bilinear(64, 64);
            let f = model.encode(&state.teacher, &view).unwrap();
            feats.push(f.iter().map(|&v| v as f64).collect());
        }
        let d = feats[0].len();
        let mean: Vec<f64> =
            (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64).collect();
        let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dev: f64 = feats
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&mean)
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / feats.len() as f64;
        println!(
            "level {level}: ||f - mean|| {:.4} vs ||mean|| {:.4} -> relative {:.4}",
            dev,
            mean_norm,
            dev / mean_norm
        );
    }
}

/// Train once with the default config, then sweep eval-side knobs of the
/// landmark clustering analysis.
fn silhouette_sweep(mutate: impl Fn(&mut TrainConfig)) {
    let corpus = desk_corpus(0);
    let mut config = TrainConfig::default();
    mutate(&mut config);
    let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
    for step in 0..trainer.schedule.total_steps {
        let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
        let phase = trainer.schedule.plans[pi].phase;
        trainer.train_step(&batch, &phase).unwrap();
    }
    let trained = trainer.state;
    let model = trainer.model;
    let random = ModelState::init(&model, config.seed);
    for patch in [16usize, 20, 24, 28, 32] {
        for levels in [vec![1u32], vec![1, 2], vec![2]] {
            let stat = |state: &ModelState| {
                let set = zeroshot::extract_landmark_embeddings(&model, state, &corpus, patch, &levels)
                    .unwrap();
                let r = zeroshot::intra_cluster_stats(&set, true).unwrap();
                r
            };
            let rt = stat(&trained);
            let rr = stat(&random);
            let lower = rt
                .per_class
                .iter()
                .zip(rr.per_class.iter())
                .filter(|(a, b)| a.summary.median < b.summary.median)
                .count();
            println!(
                "patch {patch:>2} levels {levels:?}: sil trained {:+.4} vs random {:+.4} | lower {}/{}",
                rt.silhouette,
                rr.silhouette,
                lower,
                rt.per_class.len()
            );
        }
    }
}

fn main() {
    let which: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if which == 99 {
        return probe_snr();
    }
    if which == 98 {
        return probe_feature_spread();
    }
    if which == 97 {
        return silhouette_sweep(|_| {});
    }
    if which == 95 {
        // student-vs-teacher separation after the default run
        let corpus = desk_corpus(0);
        let config = TrainConfig::default();
        let mut trainer = Trainer::new(config.clone(), &corpus).unwrap();
        for step in 0..trainer.schedule.total_steps {
            let (pi, batch) = assemble_batch(&corpus, &config, &trainer.schedule, step).unwrap();
            let phase = trainer.schedule.plans[pi].phase;
            trainer.train_step(&batch, &phase).unwrap();
        }
        let model = trainer.model;
        let mut state = trainer.state;
        let random = ModelState::init(&model, config.seed);
        let stat = |state: &ModelState| {
            let set =
                zeroshot::extract_landmark_embeddings(&model, state, &corpus, 24, &[1, 2]).unwrap();
            zeroshot::intra_cluster_stats(&set, true).unwrap().silhouette
        };
        println!("teacher: {:+.4}", stat(&state));
        // swap the student's encoder into the teacher slot
        let student_enc = state.student.subset_by_prefix("encoder.");
        for p in state.teacher.iter_mut() {
            if let Some(sp) = student_enc.try_get(&p.name) {
                p.data.clone_from(&sp.data);
            }
        }
        println!("student: {:+.4}", stat(&state));
        println!("random:  {:+.4}", stat(&random));
        return;
    }
    if which == 96 {
        return silhouette_sweep(|c| {
            for p in &mut c.phases {
                if p.mode == PhaseMode::Warmup {
                    p.epochs = 8;
                }
            }
        });
    }
    match which {
        1 => run_short("A: wd=1e-4 lr=3e-3", |c| {
            c.weight_decay = 1e-4;
            c.lr_max = 3e-3;
        }),
        2 => run_short("B: wd=0 lr=5e-3 nowarm", |c| {
            c.weight_decay = 0.0;
            c.lr_max = 5e-3;
            c.lr_warmup_frac = 0.02;
        }),
        3 => run_short("C: A + tau_t const 0.04", |c| {
            c.weight_decay = 1e-4;
            c.lr_max = 3e-3;
            c.temps = TemperaturePair { student: 0.1, teacher_start: 0.04, teacher_end: 0.04 };
        }),
        4 => run_short("D: A + center_mom 0.99", |c| {
            c.weight_decay = 1e-4;
            c.lr_max = 3e-3;
            c.center_momentum = 0.99;
        }),
        5 => run_short("E: A + lr 1e-2", |c| {
            c.weight_decay = 1e-4;
            c.lr_max = 1e-2;
        }),
        10 => zeroshot_battery("FULL base", 0, |_| {}),
        11 => zeroshot_battery("FULL base", 1, |_| {}),
        12 => zeroshot_battery("FULL base", 2, |_| {}),
        13 => zeroshot_battery("FULL tau-const", 0, |c| {
            c.temps = TemperaturePair { student: 0.1, teacher_start: 0.04, teacher_end: 0.04 };
        }),
        14 => zeroshot_battery("FULL lr4e-3", 0, |c| {
            c.lr_max = 4e-3;
        }),
        15 => zeroshot_battery("FULL joint15", 0, |c| {
            for p in &mut c.phases {
                if p.mode == PhaseMode::Joint {
                    p.epochs = 15;
                }
            }
        }),
        16 => zeroshot_battery("FULL wd1e-3+lr4e-3", 0, |c| {
            c.weight_decay = 1e-3;
            c.lr_max = 4e-3;
        }),
        _ => run_short("base: wd=5e-3 lr=2e-3", |_| {}),
    }
}
