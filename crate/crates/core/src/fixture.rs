//! Small synthetic corpora: the shipped fixture, random corpora for oracle
//! checks, and the overfit corpus.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{glyph_canvas, Glyph, Image};
use crate::mimicit::{Source, Triplet};
use crate::util::derive_seed;

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [40, 60, 220]),
    ("yellow", [230, 220, 40]),
    ("purple", [150, 50, 200]),
    ("gray", [128, 128, 128]),
];

pub fn glyph_name(g: Glyph) -> &'static str {
    match g {
        Glyph::HBar => "bar",
        Glyph::VBar => "pole",
        Glyph::Cross => "cross",
        Glyph::Square => "box",
        Glyph::Diagonal => "slash",
        Glyph::Dot => "dot",
    }
}

fn canvas(size: usize, color: usize, glyph: Glyph) -> Image {
    glyph_canvas(size, COLORS[color].1, glyph, [0, 0, 0])
}

/// Twelve triplets covering all three sources: four questions sharing one
/// instruction, three instructions about one image, and a five-frame video.
pub fn fixture_corpus(image_size: usize) -> Result<(Vec<Triplet>, BTreeMap<String, Image>)> {
    let mut images = BTreeMap::new();
    let mut out = Vec::new();
    for (i, &g) in Glyph::ALL[..4].iter().enumerate() {
        let id = format!("img-{i}");
        images.insert(id.clone(), canvas(image_size, i, g));
        out.push(Triplet::new(
            format!("vqa-{i}"),
            vec![id],
            "What color is the background?",
            COLORS[i].0,
            Source::VqaLike,
        )?);
    }
    images.insert("img-shared".into(), canvas(image_size, 4, Glyph::Cross));
    for (i, (q, a)) in [
        ("Describe the shape.", "a black cross"),
        ("What color is it?", "purple"),
        ("Is there a dot?", "no"),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(Triplet::new(
            format!("inst-{i}"),
            vec!["img-shared".into()],
            q,
            a,
            Source::InstructionLike,
        )?);
    }
    let path = [Glyph::Dot, Glyph::HBar, Glyph::VBar, Glyph::Cross, Glyph::Square];
    for (f, &g) in path.iter().enumerate() {
        let id = format!("clip-f{f}");
        images.insert(id.clone(), canvas(image_size, 5, g));
        out.push(
            Triplet::new(
                format!("vid-{f}"),
                vec![id],
                "What shape is shown now?",
                glyph_name(g),
                Source::VideoLike,
            )?
            .with_frame("clip", f as u32),
        );
    }
    Ok((out, images))
}

/// A random corpus of `n` triplets over small key spaces, so that every
/// heuristic finds peers. Image references are not backed by pixels.
pub fn random_corpus(seed: u64, n: usize) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-corpus"));
    let instructions = ["what is it", "What is it?", "name the color", "count them", "describe"];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let source = *[Source::VqaLike, Source::InstructionLike, Source::VideoLike]
            .choose(&mut rng)
            .unwrap();
        let image = format!("im{}", rng.random_range(0..6));
        let instruction = *instructions.choose(&mut rng).unwrap();
        // ids are not generated in sorted order on purpose
        let id = format!("t{:03}", (i * 37) % 1000);
        let t = Triplet::new(id, vec![image], instruction, format!("a{i}"), source).unwrap();
        out.push(if source == Source::VideoLike {
            let seq = format!("seq{}", rng.random_range(0..3));
            t.with_frame(seq, i as u32 * 3 + rng.random_range(0..3))
        } else {
            t
        });
    }
    out
}

/// `n` question triplets in groups of four sharing an instruction, each on
/// its own image; every triplet has three same-instruction peers.
pub fn overfit_corpus(n: usize, image_size: usize) -> Result<(Vec<Triplet>, BTreeMap<String, Image>)> {
    let instructions = ["what color", "which shape", "name both", "say it"];
    let mut images = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let color = i % COLORS.len();
        let glyph = Glyph::ALL[(i / COLORS.len()) % Glyph::ALL.len()];
        let id = format!("ov-{i:03}");
        images.insert(id.clone(), canvas(image_size, color, glyph));
        let inst = instructions[(i / 4) % instructions.len()];
        let answer = match inst {
            "what color" => COLORS[color].0.to_string(),
            "which shape" => glyph_name(glyph).to_string(),
            "name both" => format!("{} {}", COLORS[color].0, glyph_name(glyph)),
            _ => format!("item {i}"),
        };
        out.push(Triplet::new(format!("q{i:03}"), vec![id], inst, answer, Source::VqaLike)?);
    }
    Ok((out, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimicit::validate_sample;

    #[test]
    fn fixture_has_twelve_triplets_with_images() {
        let (t, images) = fixture_corpus(16).unwrap();
        assert_eq!(t.len(), 12);
        for r in t.iter().flat_map(|t| &t.image_refs) {
            assert!(images.contains_key(r));
        }
    }

    #[test]
    fn overfit_corpus_groups_by_instruction() {
        let (t, _) = overfit_corpus(32, 16).unwrap();
        let cfg = crate::mimicit::GroupingConfig::default();
        let samples = crate::mimicit::build_context_same_instruction(&t, &cfg);
        assert_eq!(samples.len(), 32);
        for s in &samples {
            validate_sample(s).unwrap();
            assert_eq!(s.k, 2);
        }
    }
}
