//! Synthetic in-context probe.
//!
//! Every episode binds a few glyph tags to label words at random. The
//! context shows one image per tag with its label; the query shows one of
//! the tags again on a fresh canvas. The mapping changes from episode to
//! episode, so the answer is only recoverable from the context. Evaluation
//! episodes use label sets that never co-occur during training.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate, DecodeConfig, Exemplar};
use crate::error::{Error, Result};
use crate::image::{glyph_canvas, Glyph, Image};
use crate::mimicit::{Heuristic, Source, TrainingSample, Triplet};
use crate::model::OtterModel;
use crate::tensor::Scalar;
use crate::util::derive_seed;

/// Label words; no letter appears in two of them, so the first letter of an
/// answer identifies the word.
pub const PROBE_LABELS: [&str; 6] = ["cat", "dog", "elk", "fir", "nub", "spy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IclProbeSpec {
    pub seed: u64,
    /// Tags per episode, which is also the number of context examples.
    pub n_context: usize,
    /// Size of the label pool (a prefix of [`PROBE_LABELS`]).
    pub n_labels: usize,
    /// Size of the glyph pool (a prefix of [`Glyph::ALL`]).
    pub n_tags: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    /// Label sets reserved for evaluation.
    pub held_out_sets: usize,
    pub instruction: String,
}

impl Default for IclProbeSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_context: 2,
            n_labels: PROBE_LABELS.len(),
            n_tags: Glyph::ALL.len(),
            n_train: 256,
            n_eval: 60,
            image_size: 32,
            held_out_sets: 3,
            instruction: "what is it".into(),
        }
    }
}

impl IclProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels > PROBE_LABELS.len() || self.n_tags > Glyph::ALL.len() {
            return Err(Error::Config(format!(
                "at most {} labels and {} tags are available",
                PROBE_LABELS.len(),
                Glyph::ALL.len()
            )));
        }
        if self.n_context == 0 || self.n_context > self.n_labels.min(self.n_tags) {
            return Err(Error::Config("n_context must be in 1..=min(n_labels, n_tags)".into()));
        }
        let sets = label_sets(self.n_labels, self.n_context).len();
        if self.held_out_sets == 0 || self.held_out_sets >= sets {
            return Err(Error::Config(format!(
                "held_out_sets must be in 1..{sets} for {} tags per episode",
                self.n_context
            )));
        }
        Ok(())
    }
}

/// All `k`-subsets of `0..n`, lexicographic.
fn label_sets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Training and held-out label sets.
fn split_sets(spec: &IclProbeSpec) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut sets = label_sets(spec.n_labels, spec.n_context);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "probe/split"));
    sets.shuffle(&mut rng);
    let held = sets.split_off(sets.len() - spec.held_out_sets);
    (sets, held)
}

fn canvas(rng: &mut ChaCha8Rng, size: usize, glyph: Glyph) -> Image {
    // light background, dark ink
    let bg = [0; 3].map(|_: u8| rng.random_range(160..=255));
    glyph_canvas(size, bg, glyph, [0, 0, 0])
}

struct Episode {
    tags: Vec<Glyph>,
    labels: Vec<&'static str>,
    context_images: Vec<Image>,
    /// Context presentation order.
    order: Vec<usize>,
    query: usize,
    query_image: Image,
}

fn episode(rng: &mut ChaCha8Rng, spec: &IclProbeSpec, sets: &[Vec<usize>]) -> Episode {
    let mut labels: Vec<&'static str> = sets.choose(rng).unwrap().iter().map(|&i| PROBE_LABELS[i]).collect();
    labels.shuffle(rng);
    let tags: Vec<Glyph> = Glyph::ALL[..spec.n_tags].choose_multiple(rng, spec.n_context).copied().collect();
    let context_images = tags.iter().map(|&g| canvas(rng, spec.image_size, g)).collect();
    let mut order: Vec<usize> = (0..spec.n_context).collect();
    order.shuffle(rng);
    let query = rng.random_range(0..spec.n_context);
    let query_image = canvas(rng, spec.image_size, tags[query]);
    Episode {
        tags,
        labels,
        context_images,
        order,
        query,
        query_image,
    }
}

/// Training samples in the usual sample format plus the images they
/// reference.
pub fn probe_training_set(spec: &IclProbeSpec) -> Result<(Vec<TrainingSample>, HashMap<String, Image>)> {
    spec.validate()?;
    let (train_sets, _) = split_sets(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "probe/train"));
    let mut samples = Vec::with_capacity(spec.n_train);
    let mut images = HashMap::new();
    for e in 0..spec.n_train {
        let ep = episode(&mut rng, spec, &train_sets);
        let triplet = |id: String, label: &str| {
            Triplet::new(id.clone(), vec![id], spec.instruction.clone(), label, Source::InstructionLike)
        };
        let mut context = Vec::with_capacity(spec.n_context);
        for &j in &ep.order {
            let id = format!("probe-{e:05}-c{j}");
            images.insert(id.clone(), ep.context_images[j].clone());
            context.push(triplet(id, ep.labels[j])?);
        }
        let qid = format!("probe-{e:05}-q");
        images.insert(qid.clone(), ep.query_image.clone());
        samples.push(TrainingSample {
            query: triplet(qid, ep.labels[ep.query])?,
            context,
            heuristic: Heuristic::SameInstruction,
            k: spec.n_context,
        });
    }
    Ok((samples, images))
}

/// One evaluation episode, with its context also shown under a permuted
/// mapping.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub query_tag: Glyph,
    pub query_image: Image,
    pub answer: String,
    pub context: Vec<Exemplar>,
    pub shuffled_context: Vec<Exemplar>,
    pub shuffled_answer: String,
}

/// Held-out evaluation episodes.
pub fn probe_eval_items(spec: &IclProbeSpec) -> Result<Vec<ProbeItem>> {
    spec.validate()?;
    let (_, held) = split_sets(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "probe/eval"));
    let mut items = Vec::with_capacity(spec.n_eval);
    for _ in 0..spec.n_eval {
        let ep = episode(&mut rng, spec, &held);
        // rotate labels by one so every tag changes meaning
        let n = spec.n_context;
        let shuffled: Vec<&str> = (0..n).map(|j| ep.labels[(j + 1) % n]).collect();
        let exemplars = |labels: &[&str]| -> Vec<Exemplar> {
            ep.order
                .iter()
                .map(|&j| Exemplar {
                    images: vec![ep.context_images[j].clone()],
                    instruction: spec.instruction.clone(),
                    answer: labels[j].to_string(),
                })
                .collect()
        };
        items.push(ProbeItem {
            query_tag: ep.tags[ep.query],
            query_image: ep.query_image.clone(),
            answer: ep.labels[ep.query].to_string(),
            context: exemplars(&ep.labels),
            shuffled_context: exemplars(&shuffled),
            shuffled_answer: shuffled[ep.query].to_string(),
        });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub query_tag: String,
    pub answer: String,
    pub with_context: String,
    pub without_context: String,
    pub shuffled_answer: String,
    pub shuffled: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub spec: IclProbeSpec,
    pub n_eval: usize,
    pub acc_with_context: f64,
    pub acc_without_context: f64,
    /// Share of items whose answer follows the permuted context mapping.
    pub flip_rate: f64,
    pub items: Vec<ProbeRecord>,
}

/// Generated answers start with the space that follows `[answer]`.
fn matches(generated: &str, answer: &str) -> bool {
    generated.strip_prefix(' ').unwrap_or(generated) == answer
}

/// Exact-match accuracy with the episode's context, without any context, and
/// under a permuted mapping.
pub fn icl_probe<T: Scalar>(model: &OtterModel<T>, spec: &IclProbeSpec) -> Result<ProbeReport> {
    let items = probe_eval_items(spec)?;
    let cfg = DecodeConfig {
        max_new_tokens: 8,
        ..Default::default()
    };
    let mut records = Vec::with_capacity(items.len());
    let (mut with, mut without, mut flips) = (0usize, 0usize, 0usize);
    for item in &items {
        let q = std::slice::from_ref(&item.query_image);
        let a = generate(model, &item.context, &spec.instruction, q, &cfg)?.text;
        let b = generate(model, &[], &spec.instruction, q, &cfg)?.text;
        let c = generate(model, &item.shuffled_context, &spec.instruction, q, &cfg)?.text;
        with += matches(&a, &item.answer) as usize;
        without += matches(&b, &item.answer) as usize;
        flips += matches(&c, &item.shuffled_answer) as usize;
        records.push(ProbeRecord {
            query_tag: format!("{:?}", item.query_tag),
            answer: item.answer.clone(),
            with_context: a,
            without_context: b,
            shuffled_answer: item.shuffled_answer.clone(),
            shuffled: c,
        });
    }
    let n = items.len().max(1) as f64;
    Ok(ProbeReport {
        spec: spec.clone(),
        n_eval: items.len(),
        acc_with_context: with as f64 / n,
        acc_without_context: without as f64 / n,
        flip_rate: flips as f64 / n,
        items: records,
    })
}
