//! Toy-scale Flamingo-style multimodal LM.
//!
//! Images go through a frozen patch encoder and a trainable Perceiver
//! resampler that emits a fixed number of latents per image. Text runs
//! through frozen causal blocks; before every `cross_attn_every_n`-th block a
//! trainable gated cross-attention block lets each position read the latents
//! of its most recent image. Token embedding and output projection are
//! trainable, everything else in the vision and language stacks is frozen.

mod layers;
mod media;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seqformat::tokenizer::{IMAGE, VOCAB_SIZE};
use crate::seqformat::Batch;
use crate::tensor::{Graph, ParamId, ParamStore, Parameter, Scalar, Tensor, Var};

use layers::{normal_values, Block, GatedCrossAttention, Init, LayerNorm, Linear, ResamplerLayer};
pub use media::{causal_mask, MediaLocations};

/// Name prefixes of the parameters that receive optimizer updates.
pub const TRAINABLE_PREFIXES: [&str; 4] = ["resampler.", "cross_attn.", "tok_embed", "out_proj."];

/// Standard deviation of freshly initialized embedding rows.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_lm_layers: usize,
    pub n_heads: usize,
    pub cross_attn_every_n: usize,
    pub n_latents: usize,
    pub n_resampler_layers: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_vision_layers: usize,
    pub max_media_per_sample: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_lm_layers: 4,
            n_heads: 4,
            cross_attn_every_n: 2,
            n_latents: 8,
            n_resampler_layers: 2,
            vocab_size: VOCAB_SIZE,
            image_size: 32,
            patch_size: 8,
            n_vision_layers: 2,
            max_media_per_sample: 8,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_lm_layers: 2,
            n_heads: 2,
            cross_attn_every_n: 1,
            n_latents: 4,
            n_resampler_layers: 1,
            image_size: 16,
            patch_size: 8,
            n_vision_layers: 1,
            max_media_per_sample: 4,
            max_seq_len: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.cross_attn_every_n == 0 {
            return fail("cross_attn_every_n must be at least 1".into());
        }
        if self.n_latents == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return fail("n_latents, max_seq_len and vocab_size must be positive".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn n_cross_attn_blocks(&self) -> usize {
        self.n_lm_layers.div_ceil(self.cross_attn_every_n)
    }

    fn ff_hidden(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug)]
struct VisionEncoder {
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
}

#[derive(Clone, Debug)]
struct Resampler {
    latents: ParamId,
    layers: Vec<ResamplerLayer>,
    ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
struct LanguageModel {
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    cross_attn: Vec<GatedCrossAttention>,
    ln_f: LayerNorm,
    out_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct OtterModel<T> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<T>,
    vision: VisionEncoder,
    resampler: Resampler,
    lm: LanguageModel,
}

impl<T: Scalar> OtterModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let heads = config.n_heads;
        let ffh = config.ff_hidden();
        let mut params = ParamStore::new();

        let vision = {
            let mut init = Init {
                store: &mut params,
                seed,
                frozen: true,
            };
            VisionEncoder {
                patch_embed: Linear::new(&mut init, "vision.patch_embed", config.patch_dim(), d, true)?,
                pos_embed: init.normal("vision.pos_embed", vec![config.n_patches(), d], EMBED_INIT_STD)?,
                blocks: (0..config.n_vision_layers)
                    .map(|i| Block::new(&mut init, &format!("vision.blocks.{i}"), d, heads, ffh))
                    .collect::<Result<_>>()?,
                ln_post: LayerNorm::new(&mut init, "vision.ln_post", d)?,
            }
        };

        let resampler = {
            let mut init = Init {
                store: &mut params,
                seed,
                frozen: false,
            };
            Resampler {
                latents: init.normal("resampler.latents", vec![config.n_latents, d], 1.0)?,
                layers: (0..config.n_resampler_layers)
                    .map(|i| ResamplerLayer::new(&mut init, &format!("resampler.layers.{i}"), d, heads, ffh))
                    .collect::<Result<_>>()?,
                ln_out: LayerNorm::new(&mut init, "resampler.ln_out", d)?,
            }
        };

        let (pos_embed, blocks, ln_f) = {
            let mut init = Init {
                store: &mut params,
                seed,
                frozen: true,
            };
            let pos = init.normal("lm.pos_embed", vec![config.max_seq_len, d], EMBED_INIT_STD)?;
            let blocks = (0..config.n_lm_layers)
                .map(|i| Block::new(&mut init, &format!("lm.blocks.{i}"), d, heads, ffh))
                .collect::<Result<Vec<_>>>()?;
            let ln_f = LayerNorm::new(&mut init, "lm.ln_f", d)?;
            (pos, blocks, ln_f)
        };

        let mut init = Init {
            store: &mut params,
            seed,
            frozen: false,
        };
        let cross_attn = (0..config.n_cross_attn_blocks())
            .map(|j| GatedCrossAttention::new(&mut init, &format!("cross_attn.{j}"), d, heads, ffh))
            .collect::<Result<Vec<_>>>()?;
        let tok_embed = init.normal("tok_embed", vec![config.vocab_size, d], EMBED_INIT_STD)?;
        let out_proj = Linear {
            w: init.normal("out_proj.weight", vec![d, config.vocab_size], EMBED_INIT_STD)?,
            b: Some(init.constant("out_proj.bias", vec![config.vocab_size], 0.0)?),
        };

        Ok(Self {
            config,
            seed,
            params,
            vision,
            resampler,
            lm: LanguageModel {
                tok_embed,
                pos_embed,
                blocks,
                cross_attn,
                ln_f,
                out_proj,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Non-frozen parameters, ordered by name.
    pub fn trainable_parameters(&self) -> Vec<&Parameter<T>> {
        self.params
            .trainable_ids()
            .into_iter()
            .map(|id| self.params.get(id))
            .collect()
    }

    /// Ids of every cross-attention gate parameter.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.lm
            .cross_attn
            .iter()
            .flat_map(|x| [x.attn_gate, x.ff_gate])
            .collect()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> OtterModel<U> {
        OtterModel {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.cast(),
            vision: self.vision.clone(),
            resampler: self.resampler.clone(),
            lm: self.lm.clone(),
        }
    }

    /// Grows the vocabulary. Existing rows are kept bit-exact; new embedding
    /// rows and output columns are drawn from N(0, 0.02²), new output biases
    /// are zero.
    pub fn resize_token_embeddings(&mut self, new_vocab: usize) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab < old {
            return Err(Error::Unsupported(format!(
                "cannot shrink the vocabulary from {old} to {new_vocab}"
            )));
        }
        if new_vocab == old {
            return Ok(());
        }
        let d = self.config.d_model;
        let extra = new_vocab - old;

        let emb = self.params.get_mut(self.lm.tok_embed);
        let mut data = emb.tensor.data().to_vec();
        let label = format!("resize.tok_embed.{old}.{new_vocab}");
        data.extend(normal_values(self.seed, &label, extra * d, EMBED_INIT_STD).into_iter().map(T::lit));
        emb.replace_tensor(Tensor::new(vec![new_vocab, d], data)?);

        let w = self.params.get_mut(self.lm.out_proj.w);
        let label = format!("resize.out_proj.{old}.{new_vocab}");
        let fresh = normal_values(self.seed, &label, extra * d, EMBED_INIT_STD);
        let old_w = w.tensor.data();
        let mut data = Vec::with_capacity(d * new_vocab);
        for r in 0..d {
            data.extend_from_slice(&old_w[r * old..(r + 1) * old]);
            data.extend(fresh[r * extra..(r + 1) * extra].iter().map(|&v| T::lit(v)));
        }
        w.replace_tensor(Tensor::new(vec![d, new_vocab], data)?);

        if let Some(b) = self.lm.out_proj.b {
            let b = self.params.get_mut(b);
            let mut data = b.tensor.data().to_vec();
            data.resize(new_vocab, T::zero());
            b.replace_tensor(Tensor::new(vec![new_vocab], data)?);
        }
        self.config.vocab_size = new_vocab;
        Ok(())
    }

    fn patchify(&self, img: &Image) -> Result<Vec<T>> {
        let s = self.config.image_size;
        if img.width != s || img.height != s {
            return Err(Error::dim(
                "encode_media",
                format!("expected {s}x{s} images, got {}x{}", img.width, img.height),
            ));
        }
        let p = self.config.patch_size;
        let side = s / p;
        let mut out = Vec::with_capacity(side * side * p * p * 3);
        // pixels scaled to [-1, 1]
        for py in 0..side {
            for px in 0..side {
                for y in py * p..(py + 1) * p {
                    let row = &img.pixels[(y * s + px * p) * 3..(y * s + (px + 1) * p) * 3];
                    out.extend(row.iter().map(|&b| T::lit(b as f64 / 127.5 - 1.0)));
                }
            }
        }
        Ok(out)
    }

    /// Frozen patch features `[n_patches × d]` of one image.
    fn vision_features(&self, g: &mut Graph<T>, img: &Image) -> Result<Var> {
        let store = &self.params;
        let patches = g.constant(vec![self.config.n_patches(), self.config.patch_dim()], self.patchify(img)?)?;
        let x = self.vision.patch_embed.forward(g, store, patches)?;
        let pos = g.param(store, self.vision.pos_embed);
        let mut x = g.add(x, pos)?;
        for b in &self.vision.blocks {
            x = b.forward(g, store, x, None)?;
        }
        self.vision.ln_post.forward(g, store, x)
    }

    /// Latents `[images.len()·n_latents × d]`, image by image.
    pub fn encode_images(&self, g: &mut Graph<T>, images: &[Image]) -> Result<Var> {
        if images.len() > self.config.max_media_per_sample {
            return Err(Error::Capacity {
                media: images.len(),
                max: self.config.max_media_per_sample,
            });
        }
        if images.is_empty() {
            return Err(Error::Consistency("encode_images needs at least one image".into()));
        }
        let store = &self.params;
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let feats = self.vision_features(g, img)?;
            let mut lat = g.param(store, self.resampler.latents);
            for layer in &self.resampler.layers {
                lat = layer.forward(g, store, feats, lat)?;
            }
            out.push(self.resampler.ln_out.forward(g, store, lat)?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            g.concat_rows(&out)
        }
    }

    /// Encodes `B×M` images into a `[B, M, n_latents, d_model]` tensor.
    pub fn encode_media(&self, images: &[Vec<Image>]) -> Result<Tensor<T>> {
        let m = images.first().map_or(0, Vec::len);
        if images.iter().any(|row| row.len() != m) {
            return Err(Error::dim("encode_media", "every batch row needs the same media count"));
        }
        let mut data = Vec::new();
        for row in images {
            let mut g = Graph::new();
            let v = self.encode_images(&mut g, row)?;
            data.extend_from_slice(g.data(v));
        }
        Tensor::new(vec![images.len(), m, self.config.n_latents, self.config.d_model], data)
    }

    /// Logits `[T × vocab]` for one sequence. With `media = None` every
    /// cross-attention block is skipped, giving the pure language model.
    pub fn forward_sample(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        media: Option<(&[Image], &MediaLocations)>,
    ) -> Result<Var> {
        self.check_length(ids.len())?;
        let conditioning = match media {
            Some((images, locs)) => {
                check_media_consistency(ids, images.len(), locs)?;
                if images.is_empty() {
                    None
                } else {
                    Some((self.encode_images(g, images)?, images.len(), locs))
                }
            }
            None => None,
        };
        self.text_forward(g, ids, conditioning)
    }

    /// Like [`forward_sample`](Self::forward_sample) with the image latents
    /// (`[M·n_latents × d]`, from [`encode_images`](Self::encode_images))
    /// supplied precomputed. Used by decoding to avoid re-encoding images at
    /// every step.
    pub fn forward_with_latents(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        latents: Option<(&Tensor<T>, &MediaLocations)>,
    ) -> Result<Var> {
        let conditioning = match latents {
            Some((lat, locs)) => {
                let n = self.config.n_latents;
                let m = lat.shape().first().copied().unwrap_or(0) / n;
                if lat.shape() != [m * n, self.config.d_model] {
                    return Err(Error::dim(
                        "forward_with_latents",
                        format!("latents of shape {:?}", lat.shape()),
                    ));
                }
                check_media_consistency(ids, m, locs)?;
                if m == 0 {
                    None
                } else {
                    let v = g.constant(lat.shape().to_vec(), lat.data().to_vec())?;
                    Some((v, m, locs))
                }
            }
            None => None,
        };
        self.text_forward(g, ids, conditioning)
    }

    fn check_length(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Length("empty token sequence".into()));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {t} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    fn text_forward(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        conditioning: Option<(Var, usize, &MediaLocations)>,
    ) -> Result<Var> {
        self.check_length(ids.len())?;
        let t = ids.len();
        let conditioning = conditioning.map(|(lat, m, locs)| {
            (lat, Arc::new(locs.cross_attention_mask(m, self.config.n_latents)))
        });
        let store = &self.params;
        let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = g.param(store, self.lm.tok_embed);
        let x = g.embedding(emb, &ids_usize)?;
        let pos = g.param(store, self.lm.pos_embed);
        let pos = g.slice_rows(pos, 0, t)?;
        let mut x = g.add(x, pos)?;
        let causal = Arc::new(causal_mask(t));
        for (i, block) in self.lm.blocks.iter().enumerate() {
            if i % self.config.cross_attn_every_n == 0 {
                if let Some((lat, mask)) = &conditioning {
                    let xa = &self.lm.cross_attn[i / self.config.cross_attn_every_n];
                    x = xa.forward(g, store, x, *lat, mask.clone())?;
                }
            }
            x = block.forward(g, store, x, Some(causal.clone()))?;
        }
        let x = self.lm.ln_f.forward(g, store, x)?;
        self.lm.out_proj.forward(g, store, x)
    }

    /// Logits `[(B·T) × vocab]` for a collated batch, rows laid out sample by
    /// sample.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let n = batch.media_counts[b];
            let images = &batch.media[b][..n];
            rows.push(self.forward_sample(g, &batch.ids[b], Some((images, &batch.locations[b])))?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }

    /// Next-token cross-entropy over supervised positions of a batch: the
    /// logits at position `t` predict token `t+1`, counted iff `t+1` is
    /// supervised.
    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let logits = self.forward(g, batch)?;
        let (targets, mask) = shifted_targets(batch);
        g.masked_cross_entropy(logits, &targets, &mask)
    }

    /// Convenience forward without keeping the graph.
    pub fn logits(&self, ids: &[u32], media: Option<(&[Image], &MediaLocations)>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.forward_sample(&mut g, ids, media)?;
        Ok(g.value(v).clone())
    }
}

/// Targets and mask for next-token prediction over a flattened batch.
pub fn shifted_targets(batch: &Batch) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (ids, sup) in batch.ids.iter().zip(&batch.mask) {
        let t = ids.len();
        for i in 0..t {
            if i + 1 < t {
                targets.push(ids[i + 1] as usize);
                mask.push(sup[i + 1]);
            } else {
                targets.push(0);
                mask.push(false);
            }
        }
    }
    (targets, mask)
}

fn check_media_consistency(ids: &[u32], n_media: usize, locs: &MediaLocations) -> Result<()> {
    if locs.len() != ids.len() {
        return Err(Error::Consistency(format!(
            "{} media locations for {} tokens",
            locs.len(),
            ids.len()
        )));
    }
    let image_tokens = ids.iter().filter(|&&id| id == IMAGE).count();
    if image_tokens != n_media {
        return Err(Error::Consistency(format!(
            "{image_tokens} [image] tokens but {n_media} media items"
        )));
    }
    locs.validate(n_media)?;
    let mut k = 0;
    for (t, &id) in ids.iter().enumerate() {
        if id == IMAGE {
            if locs.0[t] != Some(k) {
                return Err(Error::Consistency(format!(
                    "[image] token #{k} at position {t} is routed to {:?}",
                    locs.0[t]
                )));
            }
            k += 1;
        }
    }
    Ok(())
}
