use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use otter_core::evalgen::{generate, generate_ids, perplexity, Exemplar};
use otter_core::fixture::fixture_corpus;
use otter_core::image::{Image, ImageDir, ImageSource};
use otter_core::mimicit::{assemble_dataset, heuristic_counts, ingest_jsonl, to_record};
use otter_core::model::OtterModel;
use otter_core::seqformat::shard::{load_shards, write_shards, MANIFEST_FILE};
use otter_core::seqformat::tokenizer::{SpecialToken, ToyTokenizer, ANSWER, END_OF_CHUNK};
use otter_core::seqformat::{pack_sample, TokenizedSample};
use otter_core::trainer::{
    load_checkpoint, log_to_csv, save_checkpoint, train, Checkpoint, LogRecord, TrainOptions, LOG_HEADER,
};
use otter_core::verify::{run_all, Fault, VerifyOptions};

use crate::config::RunConfig;

pub const LOG_FILE: &str = "train_log.csv";

/// A verification run with failing properties.
#[derive(Debug)]
pub struct VerifyFailed(pub Vec<String>);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerifyFailed {}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

pub fn fixture(out: &Path, image_size: usize) -> Result<()> {
    let (triplets, images) = fixture_corpus(image_size)?;
    let image_dir = out.join("images");
    fs::create_dir_all(&image_dir)?;
    let dir = ImageDir::new(&image_dir);
    for (id, img) in &images {
        img.save(&dir.path_of(id))?;
    }
    let mut jsonl = String::new();
    for t in &triplets {
        jsonl.push_str(&to_record(t));
        jsonl.push('\n');
    }
    fs::write(out.join("triplets.jsonl"), jsonl)?;
    println!(
        "wrote {} triplets and {} images to {}",
        triplets.len(),
        images.len(),
        out.display()
    );
    Ok(())
}

pub fn build_data(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    require(&p.data, "corpus")?;
    require(&p.images, "image directory")?;
    let triplets = ingest_jsonl(&p.data).with_context(|| format!("ingesting {}", p.data.display()))?;
    let samples = assemble_dataset(&triplets, &cfg.grouping, &cfg.data.heuristics()?)?;
    let images = ImageDir::new(&p.images);
    let packed = samples
        .iter()
        .map(|s| pack_sample(s, cfg.train.supervise, &images, cfg.model.max_media_per_sample))
        .collect::<otter_core::Result<Vec<_>>>()?;
    if let Some(long) = packed.iter().find(|s| s.len() > cfg.model.max_seq_len) {
        bail!(
            "sample `{}` has {} tokens, more than model.max_seq_len {}",
            long.id,
            long.len(),
            cfg.model.max_seq_len
        );
    }
    let counts: BTreeMap<String, usize> = heuristic_counts(&samples)
        .into_iter()
        .map(|(h, n)| (h.as_str().to_string(), n))
        .collect();
    let manifest = write_shards(&packed, &p.shards, cfg.data.shard_size, counts.clone())?;
    println!("triplets {}", triplets.len());
    for (h, n) in &counts {
        println!("  {h} {n}");
    }
    println!(
        "samples {} in {} shard(s) at {}",
        manifest.total_samples,
        manifest.shards.len(),
        p.shards.display()
    );
    for s in &manifest.shards {
        println!("  {} {}", s.file, s.sha256);
    }
    if packed.is_empty() {
        eprintln!("warning: the corpus produced no training samples");
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(LOG_HEADER), "{} is not a training log", path.display());
    lines
        .filter(|l| !l.is_empty())
        .map(|l| LogRecord::parse_csv_line(l).map_err(Into::into))
        .collect()
}

/// The checkpoint under `dir` with the most steps taken.
fn latest_checkpoint(dir: &Path) -> Result<Option<Checkpoint>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<Checkpoint> = None;
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    entries.sort();
    for e in entries {
        let c = load_checkpoint(&e).with_context(|| format!("loading checkpoint {}", e.display()))?;
        if best.as_ref().is_none_or(|b| c.cursor.step > b.cursor.step) {
            best = Some(c);
        }
    }
    Ok(best)
}

pub fn train_cmd(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let p = &cfg.paths;
    let t = &cfg.train;
    println!(
        "train: lr={:e} batch={} epochs={} clip={:?} schedule=cosine loss=cross_entropy",
        t.lr, t.batch_size, t.epochs, t.clip_norm
    );
    require(&p.shards.join(MANIFEST_FILE), "shard manifest")?;
    let data = load_shards(&p.shards).with_context(|| format!("loading shards from {}", p.shards.display()))?;
    if data.is_empty() {
        bail!("no training samples in {}", p.shards.display());
    }
    let log_path = p.checkpoints.join(LOG_FILE);

    let (mut model, resume_state, mut log) = match (resume, latest_checkpoint(&p.checkpoints)?) {
        (true, Some(ck)) => {
            ensure!(
                ck.train_config == *t,
                "checkpoint was trained with a different train config"
            );
            ensure!(
                *ck.model.config() == cfg.model,
                "checkpoint holds a different model config"
            );
            let mut log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
            log.retain(|r| r.step < ck.cursor.step);
            println!("resuming at step {}", ck.cursor.step);
            (ck.model, Some((ck.state, ck.cursor)), log)
        }
        (true, None) => {
            println!("no checkpoint to resume from; starting fresh");
            (OtterModel::<f32>::new(cfg.model.clone(), cfg.seed)?, None, Vec::new())
        }
        (false, _) => (OtterModel::<f32>::new(cfg.model.clone(), cfg.seed)?, None, Vec::new()),
    };
    let total = t.total_steps(data.len());
    if resume_state.as_ref().is_some_and(|(_, c)| c.step >= total) {
        println!("training already complete ({total} steps)");
        return Ok(());
    }

    fs::create_dir_all(&p.checkpoints)?;
    let per_epoch = t.steps_per_epoch(data.len());
    let mut fresh = Vec::new();
    let mut on_step = |r: &LogRecord| {
        if (r.step + 1) % per_epoch == 0 {
            println!("epoch {} step {} loss {:.4}", r.epoch, r.step + 1, r.loss);
        }
        fresh.push(r.clone());
    };
    let result = train(
        &mut model,
        &data,
        t,
        TrainOptions {
            checkpoint_dir: Some(p.checkpoints.clone()),
            resume: resume_state,
            stop_after,
            on_step: Some(&mut on_step),
        },
    );
    log.extend(fresh);
    fs::write(&log_path, log_to_csv(&log))?;
    let outcome = result?;
    if outcome.cursor.step < total {
        let dir = p.checkpoints.join(format!("step-{:06}", outcome.cursor.step));
        save_checkpoint(&dir, &model, &outcome.state, t, &outcome.cursor)?;
        println!("stopped at step {}; checkpoint {}", outcome.cursor.step, dir.display());
    } else {
        println!(
            "done: {total} steps, final loss {:.4}, checkpoint {}",
            log.last().map_or(f64::NAN, |r| r.loss),
            p.checkpoints.join("final").display()
        );
    }
    Ok(())
}

fn load_images(dir: &Path, ids: &[String]) -> Result<Vec<Image>> {
    let src = ImageDir::new(dir);
    ids.iter()
        .map(|id| src.load(id).map_err(Into::into))
        .collect()
}

fn split_ids(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Parses `images::instruction::answer`, images comma-separated.
pub fn parse_shot(s: &str) -> Result<(Vec<String>, String, String)> {
    let parts: Vec<&str> = s.split("::").collect();
    let [images, instruction, answer] = parts.as_slice() else {
        bail!("shot `{s}` is not of the form images::instruction::answer");
    };
    Ok((split_ids(images), instruction.to_string(), answer.to_string()))
}

pub fn checkpoint_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.paths.checkpoints.join("final"), Path::to_path_buf)
}

pub fn generate_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    shots: &[String],
    images: &[String],
    instruction: &str,
) -> Result<()> {
    require(checkpoint, "checkpoint")?;
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut context = Vec::new();
    for s in shots {
        let (ids, instr, answer) = parse_shot(s)?;
        context.push(Exemplar {
            images: load_images(&cfg.paths.images, &ids)?,
            instruction: instr,
            answer,
        });
    }
    let query = load_images(&cfg.paths.images, images)?;
    let out = generate(&ck.model, &context, instruction, &query, &cfg.decode)?;
    println!("{}", out.text);
    Ok(())
}

/// Prompt up to the last `[answer]` and the reference answer after it.
pub fn split_query(s: &TokenizedSample) -> Option<(Vec<u32>, Vec<u32>)> {
    let pos = s.ids.iter().rposition(|&t| t == ANSWER)?;
    let rest = &s.ids[pos + 1..];
    let end = rest.iter().position(|&t| t == END_OF_CHUNK).unwrap_or(rest.len());
    Some((s.ids[..=pos].to_vec(), rest[..end].to_vec()))
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, limit: Option<usize>) -> Result<()> {
    require(checkpoint, "checkpoint")?;
    require(&cfg.paths.shards.join(MANIFEST_FILE), "shard manifest")?;
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut data = load_shards(&cfg.paths.shards)?;
    if let Some(n) = limit {
        data.truncate(n);
    }
    ensure!(!data.is_empty(), "no samples to evaluate in {}", cfg.paths.shards.display());
    let ppl = perplexity(&ck.model, &data, cfg.train.supervise)?;
    let mut decode = cfg.decode.clone();
    let mut hits = 0;
    let mut total = 0;
    for s in &data {
        let Some((prompt, answer)) = split_query(s) else { continue };
        decode.max_new_tokens = decode.max_new_tokens.max(answer.len() + 1);
        let g = generate_ids(&ck.model, &prompt, &s.media, &decode)?;
        total += 1;
        if g.tokens == answer {
            hits += 1;
        }
    }
    println!("samples {}", data.len());
    println!("perplexity {ppl:.4}");
    println!("exact_match {hits}/{total}");
    Ok(())
}

fn token_label(id: u32) -> String {
    if let Some(s) = SpecialToken::from_id(id) {
        return s.to_string();
    }
    let bytes = ToyTokenizer.decode(&[id]);
    match bytes.as_slice() {
        [b] if b.is_ascii_graphic() => format!("'{}'", *b as char),
        [b' '] => "' '".into(),
        [b] => format!("\\x{b:02x}"),
        _ => format!("#{id}"),
    }
}

pub fn render_sample(s: &TokenizedSample) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: {} tokens, {} supervised, {} media",
        s.id,
        s.len(),
        s.supervised_count(),
        s.media.len()
    );
    let _ = writeln!(out, "{:>5} {:>5}  {:<14} {:>3} {:>5}", "pos", "id", "token", "sup", "media");
    for (i, &id) in s.ids.iter().enumerate() {
        let media = s.media_locations.as_slice()[i].map_or("-".into(), |m| m.to_string());
        let sup = if s.supervision_mask[i] { "*" } else { "." };
        let _ = writeln!(out, "{i:>5} {id:>5}  {:<14} {sup:>3} {media:>5}", token_label(id));
    }
    out
}

/// Writes to stdout, treating a closed pipe (e.g. `| head`) as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

pub fn inspect(cfg: &RunConfig, index: Option<usize>, id: Option<&str>) -> Result<()> {
    require(&cfg.paths.shards.join(MANIFEST_FILE), "shard manifest")?;
    let data = load_shards(&cfg.paths.shards)?;
    let picked: Vec<&TokenizedSample> = match (index, id) {
        (_, Some(id)) => data.iter().filter(|s| s.id == id || s.id.starts_with(&format!("{id}/"))).collect(),
        (Some(i), None) => data.get(i).into_iter().collect(),
        (None, None) => {
            let list: String = data
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{i:>4} {} ({} tokens, {} media)\n", s.id, s.len(), s.media.len()))
                .collect();
            return emit(&list);
        }
    };
    ensure!(!picked.is_empty(), "no such sample among {} in {}", data.len(), cfg.paths.shards.display());
    emit(&picked.into_iter().map(render_sample).collect::<String>())
}

pub fn verify(seed: u64, grad_coords: usize, fault: Option<Fault>) -> Result<()> {
    let opts = VerifyOptions {
        seed,
        grad_coords,
        fault,
        ..VerifyOptions::default()
    };
    let report = run_all(&opts);
    for p in &report.properties {
        println!("{p}");
    }
    let failed: Vec<String> = report.failures().iter().map(|p| p.name.to_string()).collect();
    if !failed.is_empty() {
        return Err(VerifyFailed(failed).into());
    }
    println!("all {} properties passed", report.properties.len());
    Ok(())
}
