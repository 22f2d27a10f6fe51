//! Brute-force reference implementations. They are deliberately naive and
//! share no code with the functions they check.

use std::collections::BTreeMap;

use crate::mimicit::{sample_rank, GroupingConfig, Heuristic, Source, Triplet};
use crate::seqformat::tokenizer::{ANSWER, END_OF_CHUNK, IMAGE};

/// A sample reduced to comparable ids: `(query, heuristic, context ids)`.
pub type SampleKey = (String, Heuristic, Vec<String>);

fn peers_h1(q: &Triplet, c: &Triplet) -> bool {
    c.id != q.id && c.source == q.source && c.instruction_key == q.instruction_key && c.image_key != q.image_key
}

fn peers_h2(q: &Triplet, c: &Triplet) -> bool {
    c.id != q.id && c.source == q.source && c.image_key == q.image_key && c.instruction_key != q.instruction_key
}

/// All `k`-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn go(i: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        if i == n || n - i < k - cur.len() {
            return;
        }
        cur.push(i);
        go(i + 1, n, k, cur, out);
        cur.pop();
        go(i + 1, n, k, cur, out);
    }
    go(0, n, k, &mut cur, &mut out);
    out
}

/// Among every admissible context of size `min(k, |pool|)`, the one whose
/// sorted `(rank, id)` keys are lexicographically smallest.
fn pick(seed: u64, q: &Triplet, pool: &[&Triplet], k: usize) -> Vec<String> {
    let size = k.min(pool.len());
    let key = |t: &Triplet| (sample_rank(seed, &q.id, &t.id), t.id.clone());
    let mut best: Option<(Vec<(u64, String)>, Vec<String>)> = None;
    for s in subsets(pool.len(), size) {
        let mut keys: Vec<(u64, String)> = s.iter().map(|&i| key(pool[i])).collect();
        keys.sort();
        if best.as_ref().is_none_or(|b| keys < b.0) {
            let mut ids: Vec<String> = s.iter().map(|&i| pool[i].id.clone()).collect();
            ids.sort();
            best = Some((keys, ids));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

fn keyed(triplets: &[Triplet], cfg: &GroupingConfig, h: Heuristic, peer: fn(&Triplet, &Triplet) -> bool) -> Vec<SampleKey> {
    let mut out = Vec::new();
    for q in triplets {
        let pool: Vec<&Triplet> = triplets.iter().filter(|c| peer(q, c)).collect();
        if pool.is_empty() {
            continue;
        }
        out.push((q.id.clone(), h, pick(cfg.seed, q, &pool, cfg.k_context)));
    }
    out.sort();
    out
}

/// Same-instruction samples, sorted.
pub fn same_instruction(triplets: &[Triplet], cfg: &GroupingConfig) -> Vec<SampleKey> {
    keyed(triplets, cfg, Heuristic::SameInstruction, peers_h1)
}

/// Same-image samples, sorted.
pub fn same_image(triplets: &[Triplet], cfg: &GroupingConfig) -> Vec<SampleKey> {
    keyed(triplets, cfg, Heuristic::SameImage, peers_h2)
}

/// Sequential samples, sorted. A frame is a query iff at least `w - 1`
/// frames of its video precede it, `w` being the window length for that
/// video; its context is the last `min(w - 1, k)` of them.
pub fn sequential(triplets: &[Triplet], cfg: &GroupingConfig) -> Vec<SampleKey> {
    let mut out = Vec::new();
    for q in triplets.iter().filter(|t| t.source == Source::VideoLike) {
        let video: Vec<&Triplet> = triplets
            .iter()
            .filter(|t| t.source == Source::VideoLike && t.sequence_key == q.sequence_key)
            .collect();
        let n = video.len();
        if n < 2 {
            continue;
        }
        let w = if n < cfg.frame_window.min {
            n
        } else {
            n.min(cfg.frame_window.max)
        };
        let mut before: Vec<&Triplet> = video.into_iter().filter(|t| t.frame_index < q.frame_index).collect();
        if before.len() + 1 < w {
            continue;
        }
        before.sort_by_key(|t| t.frame_index);
        let take = (w - 1).min(cfg.k_context);
        let ctx = before[before.len() - take..].iter().map(|t| t.id.clone()).collect();
        out.push((q.id.clone(), Heuristic::Sequential, ctx));
    }
    out.sort();
    out
}

/// The union of the selected heuristics, capped per group in each builder's
/// natural order, sorted (the shuffle is not modelled).
pub fn assemble(triplets: &[Triplet], cfg: &GroupingConfig, heuristics: &[Heuristic]) -> Vec<SampleKey> {
    let find = |id: &str| triplets.iter().find(|t| t.id == id).unwrap();
    let mut hs = heuristics.to_vec();
    hs.sort();
    hs.dedup();
    let mut out = Vec::new();
    for h in hs {
        let mut samples = match h {
            Heuristic::SameInstruction => same_instruction(triplets, cfg),
            Heuristic::SameImage => same_image(triplets, cfg),
            Heuristic::Sequential => sequential(triplets, cfg),
        };
        let group = |s: &SampleKey| {
            let q = find(&s.0);
            match h {
                Heuristic::SameInstruction => format!("{:?}/{}", q.source, q.instruction_key),
                Heuristic::SameImage => format!("{:?}/{}", q.source, q.image_key),
                Heuristic::Sequential => q.sequence_key.clone().unwrap_or_default(),
            }
        };
        if h == Heuristic::Sequential {
            samples.sort_by_key(|s| (find(&s.0).sequence_key.clone(), find(&s.0).frame_index));
        }
        let mut used: BTreeMap<String, usize> = BTreeMap::new();
        for s in samples {
            let n = used.entry(group(&s)).or_default();
            if *n < cfg.max_samples_per_group {
                *n += 1;
                out.push(s);
            }
        }
    }
    out.sort();
    out
}

/// Supervised positions found by scanning ids: after each `[answer]` up to
/// and including the next `[endofchunk]`, restricted to the last chunk when
/// `query_only`.
pub fn scan_supervision(ids: &[u32], query_only: bool) -> Vec<bool> {
    let chunks = ids.iter().filter(|&&t| t == END_OF_CHUNK).count();
    let mut out = vec![false; ids.len()];
    let mut chunk = 0;
    let mut open = false;
    for (i, &t) in ids.iter().enumerate() {
        if open {
            out[i] = !query_only || chunk + 1 == chunks;
        }
        if t == ANSWER {
            open = true;
        }
        if t == END_OF_CHUNK {
            open = false;
            chunk += 1;
        }
    }
    out
}

/// Media index each position cross-attends to, found by counting `[image]`
/// tokens at or before it.
pub fn routing(ids: &[u32]) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|t| {
            let n = ids[..=t].iter().filter(|&&x| x == IMAGE).count();
            n.checked_sub(1)
        })
        .collect()
}
