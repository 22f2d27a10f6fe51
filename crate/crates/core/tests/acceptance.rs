//! Acceptance criteria 1-10. Runs without the libtest harness so that every
//! criterion prints its verdict; pass criterion numbers to run a subset,
//! e.g. `cargo test --test acceptance -- 7 9`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use otter_core::evalgen::{generate, icl_probe, probe_training_set, DecodeConfig, Exemplar, IclProbeSpec};
use otter_core::fixture::{fixture_corpus, overfit_corpus};
use otter_core::image::ImageSource;
use otter_core::mimicit::{assemble_dataset, GroupingConfig, Heuristic};
use otter_core::model::{ModelConfig, OtterModel};
use otter_core::seqformat::shard::{load_shards, write_shards};
use otter_core::seqformat::{collate_tight, pack_sample, SuperviseMode, TokenizedSample};
use otter_core::tensor::Graph;
use otter_core::trainer::{
    adamw_update, clip_global_norm, cosine_lr, global_norm, load_checkpoint, log_to_csv, save_checkpoint, train,
    AdamWHyper, Schedule, TrainConfig, TrainOptions,
};
use otter_core::verify::{
    causality, freeze_invariance, gate_zero_identity, heuristic_oracles, locality_mask, mask_isolation, mask_scanner,
    model_gradients, toy_samples, GRAD_TOL,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn all(parts: Vec<(&str, otter_core::Result<Verdict>)>) -> Verdict {
    let mut notes = Vec::new();
    let mut failed = false;
    for (name, r) in parts {
        match r {
            Ok(Ok(d)) => notes.push(format!("{name}: {d}")),
            Ok(Err(d)) => {
                failed = true;
                notes.push(format!("{name} FAILED: {d}"));
            }
            Err(e) => {
                failed = true;
                notes.push(format!("{name} ERROR: {e}"));
            }
        }
    }
    check(!failed, notes.join("; "))
}

// ----------------------------------------------------------------------- 1

fn recipe() -> Verdict {
    let c = TrainConfig::default();
    let snapshot = format!(
        "lr={:e} batch={} epochs={} schedule={:?} clip={:?} betas={:?} eps={:e} wd={}",
        c.lr, c.batch_size, c.epochs, c.schedule, c.clip_norm, c.betas, c.eps, c.weight_decay
    );
    let want = "lr=1e-5 batch=4 epochs=6 schedule=Cosine clip=1.0 betas=(0.9, 0.999) eps=1e-8 wd=0.01";
    if snapshot != want || c.schedule != Schedule::Cosine {
        return Err(snapshot);
    }
    // the training objective is the masked next-token cross-entropy
    let cfg = ModelConfig::tiny();
    let model = OtterModel::<f64>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let data = toy_samples(&cfg, 2, 1).map_err(|e| e.to_string())?;
    let s = &data[0];
    let mut g = Graph::new();
    let batch = collate_tight(&[s]).map_err(|e| e.to_string())?;
    let l = model.batch_loss(&mut g, &batch).map_err(|e| e.to_string())?;
    let loss = g.data(l)[0];
    let logits = model
        .logits(&s.ids, Some((&s.media, &s.media_locations)))
        .map_err(|e| e.to_string())?;
    let v = cfg.vocab_size;
    let (mut nll, mut n) = (0.0, 0.0);
    for t in 0..s.len() - 1 {
        if s.supervision_mask[t + 1] {
            let row = &logits.data()[t * v..(t + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            nll += z.ln() - row[s.ids[t + 1] as usize];
            n += 1.0;
        }
    }
    check(
        (loss - nll / n).abs() < 1e-10,
        format!("{snapshot}; loss {loss:.6} = mean CE {:.6}", nll / n),
    )
}

// ------------------------------------------------------------------- 2-6

fn freeze() -> Verdict {
    all(vec![("200-step run", freeze_invariance(0, 200, None))])
}

fn gradients() -> Verdict {
    match model_gradients(0, 200) {
        Ok(r) => check(
            r.max_rel_err < GRAD_TOL && r.coords >= 200,
            format!("max rel. err. {:.2e} over {} coordinates", r.max_rel_err, r.coords),
        ),
        Err(e) => Err(e.to_string()),
    }
}

fn masking() -> Verdict {
    all(vec![
        ("scanner + query_only", mask_scanner(0, 200)),
        ("isolation", mask_isolation(0)),
    ])
}

fn conditioning() -> Verdict {
    all(vec![
        ("gate-zero", gate_zero_identity(0)),
        ("locality", locality_mask(0, 100)),
        ("causality", causality(0)),
    ])
}

fn heuristics() -> Verdict {
    all(vec![("oracles", heuristic_oracles(0, 20))])
}

// ----------------------------------------------------------------------- 7

fn mean_loss(model: &OtterModel<f32>, data: &[TokenizedSample]) -> otter_core::Result<f64> {
    let refs: Vec<&TokenizedSample> = data.iter().collect();
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in refs.chunks(4) {
        let count: usize = chunk.iter().map(|s| s.supervision_mask[1..].iter().filter(|&&m| m).count()).sum();
        let mut g = Graph::new();
        let l = model.batch_loss(&mut g, &collate_tight(chunk)?)?;
        total += g.data(l)[0] as f64 * count as f64;
        n += count;
    }
    Ok(total / n as f64)
}

fn overfit() -> Verdict {
    let run = || -> otter_core::Result<Verdict> {
        let cfg = ModelConfig::default();
        let (triplets, images) = overfit_corpus(32, cfg.image_size)?;
        let samples = assemble_dataset(&triplets, &GroupingConfig::default(), &[Heuristic::SameInstruction])?;
        let data = samples
            .iter()
            .map(|s| pack_sample(s, SuperviseMode::QueryOnly, &images, cfg.max_media_per_sample))
            .collect::<otter_core::Result<Vec<_>>>()?;
        let mut model = OtterModel::<f32>::new(cfg.clone(), 0)?;
        let tc = TrainConfig {
            lr: 3e-3,
            epochs: 80,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &tc, TrainOptions::default())?;
        let loss = mean_loss(&model, &data)?;
        let mut wrong = Vec::new();
        for s in &samples {
            let load = |refs: &[String]| refs.iter().map(|r| images.load(r)).collect::<otter_core::Result<Vec<_>>>();
            let context = s
                .context
                .iter()
                .map(|c| {
                    Ok(Exemplar {
                        images: load(&c.image_refs)?,
                        instruction: c.instruction.clone(),
                        answer: c.answer.clone(),
                    })
                })
                .collect::<otter_core::Result<Vec<_>>>()?;
            let out = generate(&model, &context, &s.query.instruction, &load(&s.query.image_refs)?, &DecodeConfig::default())?;
            if out.text != format!(" {}", s.query.answer) || !out.stopped {
                wrong.push(format!("{}: {:?}", s.query.id, out.text));
            }
        }
        Ok(check(
            data.len() == 32 && loss < 0.05 && wrong.is_empty(),
            format!(
                "{} samples, d_model {}, {} LM layers: final loss {loss:.4}, {}/{} answers reproduced{}",
                data.len(),
                cfg.d_model,
                cfg.n_lm_layers,
                samples.len() - wrong.len(),
                samples.len(),
                if wrong.is_empty() { String::new() } else { format!(" (wrong: {})", wrong.join(", ")) }
            ),
        ))
    };
    run().unwrap_or_else(|e| Err(e.to_string()))
}

// ----------------------------------------------------------------------- 8

const PROBE_SEEDS: [u64; 3] = [0, 1, 2];

fn probe_spec(seed: u64) -> IclProbeSpec {
    IclProbeSpec {
        seed,
        n_train: 1024,
        image_size: 16,
        ..IclProbeSpec::default()
    }
}

fn probe_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        image_size: 16,
        ..ModelConfig::default()
    }
}

fn in_context() -> Verdict {
    let run = || -> otter_core::Result<Verdict> {
        let mut gaps = Vec::new();
        let mut notes = Vec::new();
        let mut context_changes_output = false;
        for seed in PROBE_SEEDS {
            let spec = probe_spec(seed);
            let cfg = probe_model();
            let (samples, images) = probe_training_set(&spec)?;
            let data = samples
                .iter()
                .map(|s| pack_sample(s, SuperviseMode::QueryOnly, &images, cfg.max_media_per_sample))
                .collect::<otter_core::Result<Vec<_>>>()?;
            let mut model = OtterModel::<f32>::new(cfg, seed)?;
            let tc = TrainConfig {
                lr: 3e-3,
                epochs: 10,
                batch_size: 8,
                seed,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &tc, TrainOptions::default())?;
            let r = icl_probe(&model, &spec)?;
            context_changes_output |= r.items.iter().any(|i| i.with_context != i.without_context);
            gaps.push(r.acc_with_context - r.acc_without_context);
            notes.push(format!(
                "seed {seed}: k=2 {:.3} vs k=0 {:.3}",
                r.acc_with_context, r.acc_without_context
            ));
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        Ok(check(
            mean > 0.4 && context_changes_output,
            format!("mean gap {mean:.3} (needs > 0.4); {}", notes.join(", ")),
        ))
    };
    run().unwrap_or_else(|e| Err(e.to_string()))
}

// ----------------------------------------------------------------------- 9

struct PipelineRun {
    manifest: String,
    shards: Vec<Vec<u8>>,
    log: String,
    checkpoint: BTreeMap<String, Vec<u8>>,
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
    }
    out
}

fn pipeline(root: &Path, stop_and_resume: Option<usize>) -> otter_core::Result<PipelineRun> {
    let cfg = ModelConfig {
        image_size: 16,
        ..ModelConfig::default()
    };
    let (triplets, images) = fixture_corpus(cfg.image_size)?;
    let samples = assemble_dataset(&triplets, &GroupingConfig::default(), &Heuristic::ALL)?;
    let packed = samples
        .iter()
        .map(|s| pack_sample(s, SuperviseMode::QueryOnly, &images, cfg.max_media_per_sample))
        .collect::<otter_core::Result<Vec<_>>>()?;
    let shard_dir = root.join("shards");
    let manifest = write_shards(&packed, &shard_dir, 4, BTreeMap::new())?;
    let data = load_shards(&shard_dir)?;
    let tc = TrainConfig::default();
    let ck_dir = root.join("checkpoints");
    let mut model = OtterModel::<f32>::new(cfg, 0)?;
    let log = match stop_and_resume {
        None => {
            let opts = TrainOptions {
                checkpoint_dir: Some(ck_dir.clone()),
                ..Default::default()
            };
            train(&mut model, &data, &tc, opts)?.log
        }
        Some(stop) => {
            let first = train(
                &mut model,
                &data,
                &tc,
                TrainOptions {
                    stop_after: Some(stop),
                    ..Default::default()
                },
            )?;
            let mid = root.join("interrupted");
            save_checkpoint(&mid, &model, &first.state, &tc, &first.cursor)?;
            drop(model);
            let ck = load_checkpoint(&mid)?;
            let mut model = ck.model;
            let rest = train(
                &mut model,
                &data,
                &ck.train_config,
                TrainOptions {
                    checkpoint_dir: Some(ck_dir.clone()),
                    resume: Some((ck.state, ck.cursor)),
                    ..Default::default()
                },
            )?;
            let mut log = first.log;
            log.extend(rest.log);
            log
        }
    };
    Ok(PipelineRun {
        manifest: serde_json::to_string(&manifest)?,
        shards: manifest.shards.iter().map(|s| fs::read(shard_dir.join(&s.file)).unwrap()).collect(),
        log: log_to_csv(&log),
        checkpoint: read_dir_bytes(&ck_dir.join("final")),
    })
}

fn determinism() -> Verdict {
    let run = || -> otter_core::Result<Verdict> {
        let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let a = pipeline(dirs[0].path(), None)?;
        let b = pipeline(dirs[1].path(), None)?;
        // 13 samples, batch 4: stop inside the third epoch
        let c = pipeline(dirs[2].path(), Some(10))?;
        let same = |x: &PipelineRun, y: &PipelineRun| {
            [
                ("shards", x.manifest == y.manifest && x.shards == y.shards),
                ("log", x.log == y.log),
                ("checkpoint", x.checkpoint == y.checkpoint),
            ]
            .into_iter()
            .filter(|(_, ok)| !ok)
            .map(|(n, _)| n)
            .collect::<Vec<_>>()
        };
        let repeat = same(&a, &b);
        let resume = same(&a, &c);
        let steps = a.log.lines().count() - 1;
        Ok(check(
            repeat.is_empty() && resume.is_empty() && !a.checkpoint.is_empty(),
            format!(
                "{} shard(s), {steps} steps, {} checkpoint files; repeat differs in {repeat:?}, resume at step 10 differs in {resume:?}",
                a.shards.len(),
                a.checkpoint.len()
            ),
        ))
    };
    run().unwrap_or_else(|e| Err(e.to_string()))
}

// ---------------------------------------------------------------------- 10

fn optimizer_oracles() -> Verdict {
    let h = AdamWHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut adam_err: f64 = 0.0;
    let (mut theta, mut m, mut v) = ([0.7f64], [0.0], [0.0]);
    let (mut tm, mut tv, mut want) = (0.0f64, 0.0f64, 0.7f64);
    for (i, g) in [0.5, -1.5, 0.25, 3.0, -0.125].into_iter().enumerate() {
        let t = i as i32 + 1;
        adamw_update(&mut theta, &[g], &mut m, &mut v, t as u64, 1e-3, &h);
        tm = 0.9 * tm + 0.1 * g;
        tv = 0.999 * tv + 0.001 * g * g;
        let step = (tm / (1.0 - 0.9f64.powi(t))) / ((tv / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        want -= 1e-3 * (step + 0.01 * want);
        adam_err = adam_err.max((theta[0] - want).abs());
    }

    let base = TrainConfig::default();
    let floor = TrainConfig {
        min_lr: 2e-6,
        ..TrainConfig::default()
    };
    let lr = |s, c: &TrainConfig| cosine_lr(s, 1000, c).unwrap();
    let cosine_ok = lr(0, &base) == base.lr && lr(500, &base) == base.lr / 2.0 && lr(1000, &base) == 0.0 && lr(1000, &floor) == 2e-6;

    let mut grads = vec![vec![3.0f32, -4.0, 12.0], vec![0.5; 40]];
    let mut views: Vec<&mut [f32]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
    clip_global_norm(&mut views, 1.0);
    let post = global_norm(&grads.iter().map(Vec::as_slice).collect::<Vec<_>>());

    check(
        adam_err < 1e-12 && cosine_ok && post <= 1.0 + 1e-6,
        format!("AdamW max err {adam_err:.1e}, cosine endpoints exact: {cosine_ok}, post-clip norm {post:.9}"),
    )
}

// --------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Verdict, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "recipe fidelity", recipe, Duration::from_secs(1)),
        (2, "freeze contract", freeze, Duration::from_secs(120)),
        (3, "gradient correctness", gradients, Duration::from_secs(300)),
        (4, "masking semantics", masking, Duration::from_secs(60)),
        (5, "conditioning identities", conditioning, Duration::from_secs(120)),
        (6, "heuristic oracles", heuristics, Duration::from_secs(60)),
        (7, "overfit capability", overfit, Duration::from_secs(600)),
        (8, "in-context effect", in_context, Duration::from_secs(1200)),
        (9, "determinism and resume", determinism, Duration::from_secs(600)),
        (10, "optimizer oracles", optimizer_oracles, Duration::from_secs(1)),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, f, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = f();
        let took = t0.elapsed();
        let (ok, detail) = match verdict {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        println!(
            "criterion {n:>2} {} {name} ({:.1}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !ok {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
