//! Decoding and evaluation: answer generation, perplexity and the in-context
//! probe.

mod probe;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{MediaLocations, OtterModel};
use crate::seqformat::tokenizer::{is_special, ToyTokenizer, END_OF_CHUNK, IMAGE};
use crate::seqformat::{render_parts, render_query_prompt, supervision_mask, SuperviseMode, TokenizedSample};
use crate::tensor::{Graph, Scalar, Tensor};

pub use probe::{
    icl_probe, probe_eval_items, probe_training_set, IclProbeSpec, ProbeItem, ProbeRecord, ProbeReport, PROBE_LABELS,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub temperature: f64,
    /// Seed of the sampling stream (temperature strategy only).
    pub seed: u64,
    /// Whether context chunks keep their `[answer]` separator.
    pub context_answer_token: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            strategy: Strategy::Greedy,
            temperature: 1.0,
            seed: 0,
            context_answer_token: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One in-context demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub images: Vec<Image>,
    pub instruction: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Emitted tokens, without the stop token.
    pub tokens: Vec<u32>,
    /// Decoded bytes of `tokens` (lossy UTF-8).
    pub text: String,
    /// True when decoding ended on `[endofchunk]`.
    pub stopped: bool,
}

/// Context chunks followed by the query prompt, cut right after its
/// `[answer]` token. Returns the ids and the images in order.
pub fn render_prompt(
    context: &[Exemplar],
    instruction: &str,
    images: &[Image],
    context_answer_token: bool,
) -> (Vec<u32>, Vec<Image>) {
    let mut ids = Vec::new();
    let mut media = Vec::new();
    for ex in context {
        ids.extend(render_parts(ex.images.len(), &ex.instruction, &ex.answer, context_answer_token));
        media.extend(ex.images.iter().cloned());
    }
    ids.extend(render_query_prompt(instruction, images.len()));
    media.extend(images.iter().cloned());
    (ids, media)
}

/// Whether `id` may be emitted: raw bytes, `[endofchunk]`, and anything added
/// to the vocabulary beyond the built-in specials.
fn allowed(id: usize) -> bool {
    id as u32 == END_OF_CHUNK || !is_special(id as u32)
}

/// Picks the next token from a logit row. Disallowed specials never win.
pub fn select_token(logits: &[f64], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> u32 {
    let candidates = || logits.iter().enumerate().filter(|&(i, v)| allowed(i) && !v.is_nan());
    match cfg.strategy {
        Strategy::Greedy => argmax(candidates()),
        Strategy::Temperature => {
            let max = candidates().map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<(usize, f64)> = candidates()
                .map(|(i, &v)| (i, ((v - max) / cfg.temperature).exp()))
                .collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            if !(total > 0.0 && total.is_finite()) {
                return argmax(candidates());
            }
            let mut u = rng.random::<f64>() * total;
            for &(i, w) in &weights {
                if u < w {
                    return i as u32;
                }
                u -= w;
            }
            weights.last().map_or(END_OF_CHUNK, |w| w.0 as u32)
        }
    }
}

fn argmax<'a>(it: impl Iterator<Item = (usize, &'a f64)>) -> u32 {
    let mut best = (END_OF_CHUNK as usize, f64::NEG_INFINITY);
    for (i, &v) in it {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0 as u32
}

/// Extends `prompt` until `[endofchunk]`, `max_new_tokens`, or the context
/// window is full.
pub fn generate_ids<T: Scalar>(
    model: &OtterModel<T>,
    prompt: &[u32],
    media: &[Image],
    cfg: &DecodeConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let max_len = model.config().max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::Length(format!(
            "prompt of {} tokens exceeds max_seq_len {max_len}",
            prompt.len()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Length("empty prompt".into()));
    }
    let latents: Option<Tensor<T>> = if media.is_empty() {
        None
    } else {
        let mut g = Graph::new();
        let v = model.encode_images(&mut g, media)?;
        Some(g.value(v).clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    let mut stopped = false;
    let vocab = model.config().vocab_size;
    while out.len() < cfg.max_new_tokens && ids.len() < max_len {
        let locs = MediaLocations::from_ids(&ids, IMAGE);
        let mut g = Graph::new();
        let logits = model.forward_with_latents(&mut g, &ids, latents.as_ref().map(|l| (l, &locs)))?;
        let data = g.data(logits);
        let last: Vec<f64> = data[data.len() - vocab..].iter().map(|v| v.as_f64()).collect();
        let next = select_token(&last, cfg, &mut rng);
        if next == END_OF_CHUNK {
            stopped = true;
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(Generation {
        text: String::from_utf8_lossy(&ToyTokenizer.decode(&out)).into_owned(),
        tokens: out,
        stopped,
    })
}

/// Answers `instruction` about `images` after the given demonstrations.
pub fn generate<T: Scalar>(
    model: &OtterModel<T>,
    context: &[Exemplar],
    instruction: &str,
    images: &[Image],
    cfg: &DecodeConfig,
) -> Result<Generation> {
    let (ids, media) = render_prompt(context, instruction, images, cfg.context_answer_token);
    generate_ids(model, &ids, &media, cfg)
}

/// Summed next-token NLL (in f64) and supervised-target count of one
/// sequence under `mask`.
pub fn sequence_nll<T: Scalar>(model: &OtterModel<T>, sample: &TokenizedSample, mask: &[bool]) -> Result<(f64, usize)> {
    let logits = model.logits(&sample.ids, Some((&sample.media, &sample.media_locations)))?;
    let v = model.config().vocab_size;
    let data = logits.data();
    let mut nll = 0.0;
    let mut count = 0;
    for t in 0..sample.ids.len().saturating_sub(1) {
        if !mask[t + 1] {
            continue;
        }
        let row: Vec<f64> = data[t * v..(t + 1) * v].iter().map(|x| x.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[sample.ids[t + 1] as usize];
        count += 1;
    }
    Ok((nll, count))
}

/// `exp(total masked NLL / total masked targets)` with masks rebuilt from
/// each sample's ids under `mode`.
pub fn perplexity<T: Scalar>(model: &OtterModel<T>, data: &[TokenizedSample], mode: SuperviseMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in data {
        let mask = supervision_mask(&s.ids, mode);
        if !mask.iter().skip(1).any(|&m| m) {
            continue;
        }
        let (nll, n) = sequence_nll(model, s, &mask)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seqformat::tokenizer::{ANSWER, PAD};

    #[test]
    fn specials_are_never_selected() {
        let mut logits = vec![0.0; 260];
        logits[IMAGE as usize] = 100.0;
        logits[PAD as usize] = 90.0;
        logits[ANSWER as usize] = 80.0;
        logits[b'x' as usize] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecodeConfig::default();
        assert_eq!(select_token(&logits, &cfg, &mut rng), b'x' as u32);
        let hot = DecodeConfig {
            strategy: Strategy::Temperature,
            temperature: 5.0,
            ..cfg
        };
        for _ in 0..200 {
            let t = select_token(&logits, &hot, &mut rng);
            assert!(t == END_OF_CHUNK || !is_special(t));
        }
    }

    #[test]
    fn cold_temperature_matches_greedy() {
        let logits: Vec<f64> = (0..260).map(|i| ((i * 37) % 260) as f64 / 10.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let greedy = select_token(&logits, &DecodeConfig::default(), &mut rng);
        let cold = DecodeConfig {
            strategy: Strategy::Temperature,
            temperature: 1e-4,
            ..Default::default()
        };
        for _ in 0..20 {
            assert_eq!(select_token(&logits, &cold, &mut rng), greedy);
        }
    }

    #[test]
    fn budget_and_length_errors() {
        let model = OtterModel::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let img = Image::blank(16, 16);
        let one = DecodeConfig {
            max_new_tokens: 1,
            ..Default::default()
        };
        let g = generate(&model, &[], "Q", std::slice::from_ref(&img), &one).unwrap();
        assert!(g.tokens.len() <= 1);
        let zero = DecodeConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(generate(&model, &[], "Q", &[], &zero).is_err());
        let long = "x".repeat(100);
        assert!(matches!(
            generate(&model, &[], &long, &[], &DecodeConfig::default()),
            Err(Error::Length(_))
        ));
        let a = generate(&model, &[], "Q", std::slice::from_ref(&img), &DecodeConfig::default()).unwrap();
        let b = generate(&model, &[], "Q", std::slice::from_ref(&img), &DecodeConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
