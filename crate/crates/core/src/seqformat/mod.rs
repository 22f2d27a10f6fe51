//! Rendering samples into the training template.
//!
//! Each triplet becomes one chunk:
//!
//! ```text
//! [image]… User: <instruction> GPT:[answer] <answer>[endofchunk]
//! ```
//!
//! with one `[image]` per image. Context chunks come first, the query chunk
//! last. Supervised positions are the tokens after `[answer]` up to and
//! including `[endofchunk]`.

pub mod shard;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSource};
use crate::mimicit::{TrainingSample, Triplet};
use crate::model::MediaLocations;
use tokenizer::{ToyTokenizer, ANSWER, END_OF_CHUNK, IMAGE, PAD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuperviseMode {
    /// Only the query chunk's answer is a prediction target.
    #[default]
    QueryOnly,
    /// Every chunk's answer is a prediction target.
    AllAnswers,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    /// Free-form identifier, typically `<query id>/<heuristic>`.
    pub id: String,
    pub ids: Vec<u32>,
    pub supervision_mask: Vec<bool>,
    pub media_locations: MediaLocations,
    pub media: Vec<Image>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn supervised_count(&self) -> usize {
        self.supervision_mask.iter().filter(|&&m| m).count()
    }
}

/// `bytes("User: " + instruction + " GPT:")`
pub fn prompt_bytes(instruction: &str) -> Vec<u32> {
    ToyTokenizer.encode_str(&format!("User: {instruction} GPT:"))
}

/// Renders one chunk. Without `include_answer_token` the `[answer]` separator
/// is left out and everything else is unchanged.
pub fn render_chunk(t: &Triplet, include_answer_token: bool) -> Vec<u32> {
    render_parts(t.image_refs.len(), &t.instruction, &t.answer, include_answer_token)
}

/// [`render_chunk`] from loose parts.
pub fn render_parts(n_images: usize, instruction: &str, answer: &str, include_answer_token: bool) -> Vec<u32> {
    let mut ids = vec![IMAGE; n_images];
    ids.extend(prompt_bytes(instruction));
    if include_answer_token {
        ids.push(ANSWER);
    }
    ids.extend(ToyTokenizer.encode_str(&format!(" {answer}")));
    ids.push(END_OF_CHUNK);
    ids
}

/// Query prefix for generation: images, prompt bytes, then `[answer]`.
pub fn render_query_prompt(instruction: &str, n_images: usize) -> Vec<u32> {
    let mut ids = vec![IMAGE; n_images];
    ids.extend(prompt_bytes(instruction));
    ids.push(ANSWER);
    ids
}

/// Marks every position strictly after an `[answer]` token through the next
/// `[endofchunk]` inclusive, for the chunks selected by `supervised`.
fn answer_mask(ids: &[u32], supervised: impl Fn(usize) -> bool) -> Vec<bool> {
    let mut mask = vec![false; ids.len()];
    let mut chunk = 0;
    let mut inside = false;
    for (i, &id) in ids.iter().enumerate() {
        if inside {
            mask[i] = supervised(chunk);
        }
        if id == ANSWER {
            inside = true;
        } else if id == END_OF_CHUNK {
            inside = false;
            chunk += 1;
        }
    }
    mask
}

/// Supervision mask of a rendered sequence under `mode`. The query is the
/// last chunk.
pub fn supervision_mask(ids: &[u32], mode: SuperviseMode) -> Vec<bool> {
    let chunks = ids.iter().filter(|&&id| id == END_OF_CHUNK).count();
    answer_mask(ids, |c| match mode {
        SuperviseMode::QueryOnly => c + 1 == chunks,
        SuperviseMode::AllAnswers => true,
    })
}

/// Renders context chunks then the query chunk and attaches media.
pub fn pack_sample(
    sample: &TrainingSample,
    mode: SuperviseMode,
    images: &dyn ImageSource,
    max_media: usize,
) -> Result<TokenizedSample> {
    let total = sample.total_images();
    if total > max_media {
        return Err(Error::Capacity {
            media: total,
            max: max_media,
        });
    }
    let chunks: Vec<&Triplet> = sample.context.iter().chain(std::iter::once(&sample.query)).collect();
    let mut ids = Vec::new();
    let mut media = Vec::with_capacity(total);
    for t in &chunks {
        ids.extend(render_chunk(t, true));
        for r in &t.image_refs {
            media.push(images.load(r)?);
        }
    }
    let supervision_mask = supervision_mask(&ids, mode);
    Ok(TokenizedSample {
        id: format!("{}/{}", sample.query.id, sample.heuristic.as_str()),
        media_locations: MediaLocations::from_ids(&ids, IMAGE),
        ids,
        supervision_mask,
        media,
    })
}

/// A right-padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub locations: Vec<MediaLocations>,
    /// `B × M` images, rows padded with blank images up to the largest count.
    pub media: Vec<Vec<Image>>,
    /// Real (unpadded) media count per row.
    pub media_counts: Vec<usize>,
    /// Real (unpadded) token count per row.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// Pads every sample to `max_len` with `pad_id`; padding is unsupervised and
/// routes to no media. Samples longer than `max_len` are an error.
pub fn collate(samples: &[&TokenizedSample], max_len: usize, pad_id: u32) -> Result<Batch> {
    if let Some(s) = samples.iter().find(|s| s.len() > max_len) {
        return Err(Error::Truncation {
            len: s.len(),
            max_len,
        });
    }
    let max_media = samples.iter().map(|s| s.media.len()).max().unwrap_or(0);
    let blank = samples
        .iter()
        .flat_map(|s| s.media.first())
        .next()
        .map(|img| Image::blank(img.width, img.height));
    let mut batch = Batch {
        ids: Vec::with_capacity(samples.len()),
        mask: Vec::with_capacity(samples.len()),
        locations: Vec::with_capacity(samples.len()),
        media: Vec::with_capacity(samples.len()),
        media_counts: Vec::with_capacity(samples.len()),
        lengths: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let pad = max_len - s.len();
        let mut ids = s.ids.clone();
        ids.extend(std::iter::repeat_n(pad_id, pad));
        let mut mask = s.supervision_mask.clone();
        mask.extend(std::iter::repeat_n(false, pad));
        let mut locs = s.media_locations.0.clone();
        locs.extend(std::iter::repeat_n(None, pad));
        let mut media = s.media.clone();
        if let Some(b) = &blank {
            media.resize(max_media, b.clone());
        }
        batch.ids.push(ids);
        batch.mask.push(mask);
        batch.locations.push(MediaLocations(locs));
        batch.media.push(media);
        batch.media_counts.push(s.media.len());
        batch.lengths.push(s.len());
    }
    Ok(batch)
}

/// Collates to the longest sample in the group, padding with `[pad]`.
pub fn collate_tight(samples: &[&TokenizedSample]) -> Result<Batch> {
    let max_len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    collate(samples, max_len, PAD)
}
