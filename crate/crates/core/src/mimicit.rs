//! Triplet ingestion and in-context sample construction.
//!
//! A training sample is a queried (images, instruction, answer) triplet plus
//! an ordered list of context triplets chosen by one of three heuristics:
//!
//! * `same_instruction`: peers with the same normalized instruction on a
//!   different image.
//! * `same_image`: peers on the same image with a different instruction.
//! * `sequential`: earlier frames of the same video, inside a sliding window
//!   of 4 to 8 frames.
//!
//! Context is always drawn from triplets of the query's own source.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    VqaLike,
    InstructionLike,
    VideoLike,
}

impl Source {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vqa_like" => Some(Source::VqaLike),
            "instruction_like" => Some(Source::InstructionLike),
            "video_like" => Some(Source::VideoLike),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::VqaLike => "vqa_like",
            Source::InstructionLike => "instruction_like",
            Source::VideoLike => "video_like",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub image_refs: Vec<String>,
    pub instruction: String,
    pub answer: String,
    pub source: Source,
    pub instruction_key: String,
    pub image_key: String,
    pub sequence_key: Option<String>,
    pub frame_index: Option<u32>,
}

impl Triplet {
    pub fn new(
        id: impl Into<String>,
        image_refs: Vec<String>,
        instruction: impl Into<String>,
        answer: impl Into<String>,
        source: Source,
    ) -> Result<Self> {
        let instruction = instruction.into();
        let answer = answer.into();
        let id = id.into();
        if instruction.trim().is_empty() || answer.trim().is_empty() || image_refs.is_empty() {
            return Err(Error::Consistency(format!(
                "triplet `{id}` needs at least one image and a non-empty instruction and answer"
            )));
        }
        Ok(Self {
            instruction_key: normalize_instruction(&instruction),
            image_key: image_refs.join("|"),
            id,
            image_refs,
            instruction,
            answer,
            source,
            sequence_key: None,
            frame_index: None,
        })
    }

    pub fn with_frame(mut self, sequence: impl Into<String>, frame: u32) -> Self {
        self.sequence_key = Some(sequence.into());
        self.frame_index = Some(frame);
        self
    }
}

/// Lowercases, strips punctuation, trims, and collapses whitespace runs.
pub fn normalize_instruction(s: &str) -> String {
    let lowered: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    SameInstruction,
    SameImage,
    Sequential,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::SameInstruction, Heuristic::SameImage, Heuristic::Sequential];

    pub fn as_str(self) -> &'static str {
        match self {
            Heuristic::SameInstruction => "same_instruction",
            Heuristic::SameImage => "same_image",
            Heuristic::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub query: Triplet,
    pub context: Vec<Triplet>,
    pub heuristic: Heuristic,
    pub k: usize,
}

impl TrainingSample {
    /// Key of the group this sample was drawn from.
    pub fn group_key(&self) -> String {
        let q = &self.query;
        match self.heuristic {
            Heuristic::SameInstruction => format!("{}/{}", q.source.as_str(), q.instruction_key),
            Heuristic::SameImage => format!("{}/{}", q.source.as_str(), q.image_key),
            Heuristic::Sequential => q.sequence_key.clone().unwrap_or_default(),
        }
    }

    pub fn total_images(&self) -> usize {
        self.context
            .iter()
            .chain(std::iter::once(&self.query))
            .map(|t| t.image_refs.len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameWindow {
    pub min: usize,
    pub max: usize,
}

impl Default for FrameWindow {
    fn default() -> Self {
        Self { min: 4, max: 8 }
    }
}

impl FrameWindow {
    /// Window length for a video of `n` frames.
    pub fn length_for(&self, n: usize) -> usize {
        n.max(self.min).min(self.max).min(n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub k_context: usize,
    pub frame_window: FrameWindow,
    pub seed: u64,
    pub max_samples_per_group: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            k_context: 2,
            frame_window: FrameWindow::default(),
            seed: 0,
            max_samples_per_group: 1000,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.frame_window;
        if !(4..=8).contains(&w.min) || !(4..=8).contains(&w.max) || w.min > w.max {
            return Err(Error::Config(format!(
                "frame_window {}..={} must lie within 4..=8",
                w.min, w.max
            )));
        }
        if self.max_samples_per_group == 0 {
            return Err(Error::Config("max_samples_per_group must be positive".into()));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ ingest

fn field_str(obj: &serde_json::Map<String, Value>, field: &'static str, line: usize) -> Result<String> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(Error::Schema {
            line,
            field,
            message: "missing".into(),
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Schema {
            line,
            field,
            message: "expected a string".into(),
        }),
    }
}

/// Parses one JSONL record; `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Triplet> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(Error::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    let schema = |field: &'static str, message: &str| Error::Schema {
        line,
        field,
        message: message.into(),
    };

    let id = field_str(&obj, "id", line)?;
    let images = match obj.get("images") {
        None | Some(Value::Null) => return Err(schema("images", "missing")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| schema("images", "expected an array of strings"))?,
        Some(_) => return Err(schema("images", "expected an array of strings")),
    };
    if images.is_empty() {
        return Err(schema("images", "needs at least one image"));
    }
    let instruction = field_str(&obj, "instruction", line)?;
    if instruction.trim().is_empty() {
        return Err(schema("instruction", "must not be empty"));
    }
    let answer = field_str(&obj, "answer", line)?;
    if answer.trim().is_empty() {
        return Err(schema("answer", "must not be empty"));
    }
    let source_str = field_str(&obj, "source", line)?;
    let source = Source::parse(&source_str)
        .ok_or_else(|| schema("source", &format!("unknown source `{source_str}`")))?;

    let sequence = match obj.get("sequence") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema("sequence", "expected a string")),
    };
    let frame = match obj.get("frame") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .and_then(|f| u32::try_from(f).ok())
                .ok_or_else(|| schema("frame", "expected a non-negative integer"))?,
        ),
    };
    if source == Source::VideoLike {
        if sequence.is_none() {
            return Err(schema("sequence", "required for video_like records"));
        }
        if frame.is_none() {
            return Err(schema("frame", "required for video_like records"));
        }
    }

    let mut t = Triplet::new(id, images, instruction, answer, source)?;
    t.sequence_key = sequence;
    t.frame_index = frame;
    Ok(t)
}

/// Reads a JSONL corpus, one record per non-blank line.
pub fn ingest_str(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_record(line, i + 1)?;
        if !seen.insert(t.id.clone()) {
            return Err(Error::DuplicateId { id: t.id, line: i + 1 });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn ingest_jsonl(path: &Path) -> Result<Vec<Triplet>> {
    ingest_str(&fs::read_to_string(path)?)
}

/// Serializes a triplet back into the JSONL record schema.
pub fn to_record(t: &Triplet) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), Value::from(t.id.clone()));
    obj.insert("images".into(), Value::from(t.image_refs.clone()));
    obj.insert("instruction".into(), Value::from(t.instruction.clone()));
    obj.insert("answer".into(), Value::from(t.answer.clone()));
    obj.insert("source".into(), Value::from(t.source.as_str()));
    if let Some(s) = &t.sequence_key {
        obj.insert("sequence".into(), Value::from(s.clone()));
    }
    if let Some(f) = t.frame_index {
        obj.insert("frame".into(), Value::from(f));
    }
    Value::Object(obj).to_string()
}

// --------------------------------------------------------------- sampling

/// Deterministic rank of a context candidate for a given query.
pub fn sample_rank(seed: u64, query_id: &str, candidate_id: &str) -> u64 {
    derive_seed(seed, &format!("{query_id}\u{0}{candidate_id}"))
}

/// Picks `min(k, pool.len())` candidates without replacement: lowest seeded
/// rank first, ties by ascending id. The result is ordered by ascending id.
pub fn select_context<'a>(seed: u64, query_id: &str, pool: &[&'a Triplet], k: usize) -> Vec<&'a Triplet> {
    let mut ranked: Vec<(u64, &Triplet)> = pool.iter().map(|t| (sample_rank(seed, query_id, &t.id), *t)).collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let mut picked: Vec<&Triplet> = ranked.into_iter().take(k).map(|(_, t)| t).collect();
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    picked
}

fn by_id(triplets: &[Triplet]) -> Vec<&Triplet> {
    let mut v: Vec<&Triplet> = triplets.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn build_keyed<F, G>(triplets: &[Triplet], cfg: &GroupingConfig, heuristic: Heuristic, group: F, differ: G) -> Vec<TrainingSample>
where
    F: Fn(&Triplet) -> &str,
    G: Fn(&Triplet) -> &str,
{
    let mut groups: BTreeMap<(Source, &str), Vec<&Triplet>> = BTreeMap::new();
    for t in by_id(triplets) {
        groups.entry((t.source, group(t))).or_default().push(t);
    }
    let mut out = Vec::new();
    for q in by_id(triplets) {
        let members = &groups[&(q.source, group(q))];
        let pool: Vec<&Triplet> = members
            .iter()
            .copied()
            .filter(|c| c.id != q.id && differ(c) != differ(q))
            .collect();
        if pool.is_empty() {
            continue;
        }
        let context: Vec<Triplet> = select_context(cfg.seed, &q.id, &pool, cfg.k_context)
            .into_iter()
            .cloned()
            .collect();
        out.push(TrainingSample {
            query: q.clone(),
            k: context.len(),
            context,
            heuristic,
        });
    }
    out
}

/// Context = peers sharing the normalized instruction on a different image.
pub fn build_context_same_instruction(triplets: &[Triplet], cfg: &GroupingConfig) -> Vec<TrainingSample> {
    build_keyed(
        triplets,
        cfg,
        Heuristic::SameInstruction,
        |t| &t.instruction_key,
        |t| &t.image_key,
    )
}

/// Context = other instructions asked about the same image.
pub fn build_context_same_image(triplets: &[Triplet], cfg: &GroupingConfig) -> Vec<TrainingSample> {
    build_keyed(
        triplets,
        cfg,
        Heuristic::SameImage,
        |t| &t.image_key,
        |t| &t.instruction_key,
    )
}

/// Context = up to `k` preceding frames inside each sliding window over a
/// video's frames; the window's last frame is the query.
pub fn build_context_sequential(triplets: &[Triplet], cfg: &GroupingConfig) -> Result<Vec<TrainingSample>> {
    let mut videos: BTreeMap<&str, Vec<&Triplet>> = BTreeMap::new();
    for t in triplets.iter().filter(|t| t.source == Source::VideoLike) {
        let seq = t.sequence_key.as_deref().ok_or_else(|| Error::TripletSchema {
            id: t.id.clone(),
            field: "sequence",
        })?;
        if t.frame_index.is_none() {
            return Err(Error::TripletSchema {
                id: t.id.clone(),
                field: "frame",
            });
        }
        videos.entry(seq).or_default().push(t);
    }
    let mut out = Vec::new();
    for (seq, mut frames) in videos {
        frames.sort_by_key(|t| (t.frame_index, t.id.clone()));
        if let Some(w) = frames.windows(2).find(|w| w[0].frame_index == w[1].frame_index) {
            return Err(Error::Consistency(format!(
                "sequence `{seq}` repeats frame {} (`{}`, `{}`)",
                w[0].frame_index.unwrap_or_default(),
                w[0].id,
                w[1].id
            )));
        }
        let n = frames.len();
        if n < 2 {
            continue;
        }
        let w = cfg.frame_window.length_for(n);
        for window in frames.windows(w) {
            let (query, before) = window.split_last().expect("window is non-empty");
            let take = before.len().min(cfg.k_context);
            let context: Vec<Triplet> = before[before.len() - take..].iter().map(|t| (*t).clone()).collect();
            out.push(TrainingSample {
                query: (*query).clone(),
                k: context.len(),
                context,
                heuristic: Heuristic::Sequential,
            });
        }
    }
    Ok(out)
}

pub fn build_context(triplets: &[Triplet], cfg: &GroupingConfig, heuristic: Heuristic) -> Result<Vec<TrainingSample>> {
    match heuristic {
        Heuristic::SameInstruction => Ok(build_context_same_instruction(triplets, cfg)),
        Heuristic::SameImage => Ok(build_context_same_image(triplets, cfg)),
        Heuristic::Sequential => build_context_sequential(triplets, cfg),
    }
}

/// Union of the selected heuristics' samples, deduplicated on
/// `(query id, heuristic)`, capped per group, then shuffled by seed.
pub fn assemble_dataset(
    triplets: &[Triplet],
    cfg: &GroupingConfig,
    heuristics: &[Heuristic],
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let selected: BTreeSet<Heuristic> = heuristics.iter().copied().collect();
    if selected.is_empty() {
        return Err(Error::Config("at least one context heuristic must be selected".into()));
    }
    let mut seen = HashSet::new();
    let mut per_group: BTreeMap<(Heuristic, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for h in selected {
        for s in build_context(triplets, cfg, h)? {
            if !seen.insert((s.query.id.clone(), h)) {
                continue;
            }
            let n = per_group.entry((h, s.group_key())).or_default();
            if *n >= cfg.max_samples_per_group {
                continue;
            }
            *n += 1;
            out.push(s);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "assemble"));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Per-heuristic sample counts, in canonical heuristic order.
pub fn heuristic_counts(samples: &[TrainingSample]) -> BTreeMap<Heuristic, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.heuristic).or_default() += 1;
    }
    counts
}

/// Checks the key constraint of the sample's heuristic and the id rules.
pub fn validate_sample(s: &TrainingSample) -> Result<()> {
    let q = &s.query;
    let fail = |m: String| Err(Error::Consistency(format!("sample for `{}`: {m}", q.id)));
    let mut ids = HashSet::new();
    for c in &s.context {
        if c.id == q.id {
            return fail("context contains the query".into());
        }
        if !ids.insert(&c.id) {
            return fail(format!("context repeats `{}`", c.id));
        }
        if c.source != q.source {
            return fail(format!("context `{}` comes from another source", c.id));
        }
        let ok = match s.heuristic {
            Heuristic::SameInstruction => c.instruction_key == q.instruction_key && c.image_key != q.image_key,
            Heuristic::SameImage => c.image_key == q.image_key && c.instruction_key != q.instruction_key,
            Heuristic::Sequential => {
                c.sequence_key.is_some() && c.sequence_key == q.sequence_key && c.frame_index < q.frame_index
            }
        };
        if !ok {
            return fail(format!("context `{}` violates the {} constraint", c.id, s.heuristic.as_str()));
        }
    }
    if s.heuristic == Heuristic::Sequential
        && s.context.windows(2).any(|w| w[0].frame_index >= w[1].frame_index)
    {
        return fail("sequential context is not in frame order".into());
    }
    if s.k != s.context.len() {
        return fail(format!("k = {} but context has {} entries", s.k, s.context.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(id: &str, img: &str, instr: &str) -> Triplet {
        Triplet::new(id, vec![img.into()], instr, "ans", Source::VqaLike).unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_instruction("  What  is THIS?\t"), "what is this");
        assert_eq!(normalize_instruction("Describe, the image."), "describe the image");
    }

    #[test]
    fn ingest_errors_carry_line_and_field() {
        assert!(ingest_str("").unwrap().is_empty());
        let good = r#"{"id":"a","images":["i"],"instruction":"q","answer":"x","source":"vqa_like"}"#;
        let missing = r#"{"id":"b","images":["i"],"instruction":"q","source":"vqa_like"}"#;
        let err = ingest_str(&format!("{good}\n{missing}\n")).unwrap_err();
        match err {
            Error::Schema { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "answer");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(ingest_str("{not json"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            ingest_str(&format!("{good}\n{good}")),
            Err(Error::DuplicateId { line: 2, .. })
        ));
        let video = r#"{"id":"v","images":["f"],"instruction":"q","answer":"x","source":"video_like","sequence":"s"}"#;
        assert!(matches!(ingest_str(video), Err(Error::Schema { field: "frame", .. })));
    }

    #[test]
    fn record_round_trip() {
        let tr = t("a", "img", "What?").with_frame("s", 3);
        assert_eq!(parse_record(&to_record(&tr), 1).unwrap(), tr);
    }

    #[test]
    fn same_instruction_basic() {
        let ts: Vec<_> = (0..4).map(|i| t(&format!("t{i}"), &format!("img{i}"), "Color?")).collect();
        let cfg = GroupingConfig::default();
        let out = build_context_same_instruction(&ts, &cfg);
        assert_eq!(out.len(), 4);
        for s in &out {
            assert_eq!(s.context.len(), 2);
            validate_sample(s).unwrap();
        }
        let unique: Vec<_> = (0..4).map(|i| t(&format!("t{i}"), &format!("img{i}"), &format!("q{i}"))).collect();
        assert!(build_context_same_instruction(&unique, &cfg).is_empty());
        let k0 = GroupingConfig { k_context: 0, ..cfg };
        let out = build_context_same_instruction(&ts, &k0);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| s.context.is_empty()));
    }

    #[test]
    fn same_image_excludes_identical_instruction() {
        let ts = vec![t("a", "img", "q1"), t("b", "img", "q1"), t("c", "img", "q2")];
        let out = build_context_same_image(&ts, &GroupingConfig::default());
        let a = out.iter().find(|s| s.query.id == "a").unwrap();
        assert_eq!(a.context.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["c"]);
    }

    #[test]
    fn frame_window_lengths() {
        let w = FrameWindow::default();
        assert_eq!(w.length_for(2), 2);
        assert_eq!(w.length_for(6), 6);
        assert_eq!(w.length_for(12), 8);
    }

    #[test]
    fn sequential_short_videos() {
        let f = |i: u32| {
            Triplet::new(format!("f{i}"), vec![format!("frame{i}")], "what happens", "x", Source::VideoLike)
                .unwrap()
                .with_frame("vid", i)
        };
        let cfg = GroupingConfig::default();
        assert!(build_context_sequential(&[f(0)], &cfg).unwrap().is_empty());
        let two = build_context_sequential(&[f(1), f(0)], &cfg).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].query.id, "f1");
        assert_eq!(two[0].context[0].id, "f0");
        let mut bad = f(0);
        bad.frame_index = None;
        assert!(matches!(
            build_context_sequential(&[bad], &cfg),
            Err(Error::TripletSchema { field: "frame", .. })
        ));
    }

    #[test]
    fn assemble_rejects_empty_heuristics() {
        assert!(matches!(
            assemble_dataset(&[], &GroupingConfig::default(), &[]),
            Err(Error::Config(_))
        ));
    }
}
