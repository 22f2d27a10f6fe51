//! The invariant suite: finite-difference gradient checks, freeze
//! invariance, loss-mask isolation, conditioning identities and oracle
//! equivalence of the context heuristics.

pub mod oracle;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fixture::{random_corpus, COLORS};
use crate::image::{Glyph, Image};
use crate::mimicit::{
    assemble_dataset, build_context, build_context_same_instruction, GroupingConfig, Heuristic, Source,
    TrainingSample, Triplet,
};
use crate::model::{shifted_targets, MediaLocations, ModelConfig, OtterModel, TRAINABLE_PREFIXES};
use crate::seqformat::tokenizer::{END_OF_CHUNK, IMAGE};
use crate::seqformat::{collate_tight, pack_sample, Batch, SuperviseMode, TokenizedSample};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::trainer::{train, TrainConfig, TrainOptions};
use crate::util::derive_seed;

/// Finite-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_check(name: &'static str, r: Result<std::result::Result<String, String>>) -> Self {
        match r {
            Ok(Ok(d)) => Self::new(name, true, d),
            Ok(Err(d)) => Self::new(name, false, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&PropertyResult> {
        self.properties.iter().filter(|p| !p.passed).collect()
    }
}

/// A deliberate defect, used to show the suite catches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The vision encoder is left trainable.
    UnfreezeVision,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub grad_coords: usize,
    pub freeze_steps: usize,
    pub corpora: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            grad_coords: 200,
            freeze_steps: 50,
            corpora: 20,
            fault: None,
        }
    }
}

/// Runs every property; a property that errors counts as failed.
pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let s = opts.seed;
    let properties = vec![
        PropertyResult::from_check("primitive-gradients", primitive_gradients(s).map(|r| r.verdict())),
        PropertyResult::from_check(
            "model-gradients",
            model_gradients(s, opts.grad_coords).map(|r| r.verdict()),
        ),
        PropertyResult::from_check("freeze-invariance", freeze_invariance(s, opts.freeze_steps, opts.fault)),
        PropertyResult::from_check("mask-scanner", mask_scanner(s, 50)),
        PropertyResult::from_check("mask-isolation", mask_isolation(s)),
        PropertyResult::from_check("gate-zero-identity", gate_zero_identity(s)),
        PropertyResult::from_check("locality-mask", locality_mask(s, 100)),
        PropertyResult::from_check("causality", causality(s)),
        PropertyResult::from_check("heuristic-oracles", heuristic_oracles(s, opts.corpora)),
    ];
    VerifyReport { properties }
}

type Verdict = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ gradients

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// producing huge ratios out of rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub coords: usize,
    pub max_rel_err: f64,
    /// Where the worst error occurred.
    pub worst: String,
}

impl GradCheck {
    fn verdict(&self) -> Verdict {
        verdict(
            self.max_rel_err < GRAD_TOL,
            format!(
                "max rel. err. {:.2e} over {} coordinates (worst at {})",
                self.max_rel_err, self.coords, self.worst
            ),
        )
    }

    fn merge(&mut self, other: GradCheck) {
        self.coords += other.coords;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

type Build<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Checks every input coordinate of `f` against central differences of
/// `sum(f(inputs) ⊙ w)` for a fixed random `w`.
pub fn check_op(name: &str, inputs: &[Tensor<f64>], f: Build<'_>, seed: u64) -> Result<GradCheck> {
    let loss = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(grads)))
            .collect();
        let out = f(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = g.constant(shape, w)?;
        let y = g.mul(out, w)?;
        let l = g.sum(y);
        let value = g.data(l)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(l)?;
        let gs = vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = loss(inputs, true)?;
    let mut out = GradCheck {
        coords: 0,
        max_rel_err: 0.0,
        worst: name.to_string(),
    };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_EPS;
            let (up, _) = loss(&work, false)?;
            work[i].data_mut()[j] = x - FD_EPS;
            let (down, _) = loss(&work, false)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let e = rel_err(analytic[i][j], numeric);
            out.coords += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = format!("{name} input {i} [{j}]");
            }
        }
    }
    Ok(out)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_gradients(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/primitives"));
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape.to_vec());
    let visible = std::sync::Arc::new(vec![true, false, true, true, true, false, false, true, true]);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_bias", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| Ok(g.scale(v[0], 0.7)))),
        (
            "scale_add",
            vec![r(&[2, 2]), r(&[2, 2])],
            Box::new(|g, v| g.scale_add(v[0], v[1], 0.3, -1.2)),
        ),
        ("scale_by", vec![r(&[2, 3]), r(&[1])], Box::new(|g, v| g.scale_by(v[0], v[1]))),
        ("tanh", vec![r(&[6])], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("gelu", vec![r(&[4])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        (
            "layer_norm",
            vec![r(&[3, 5]), r(&[5]), r(&[5])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("softmax", vec![r(&[2, 4])], Box::new(|g, v| g.softmax(v[0]))),
        (
            "masked_softmax",
            vec![r(&[3, 3])],
            Box::new(move |g, v| g.masked_softmax(v[0], Some(visible.clone()))),
        ),
        ("embedding", vec![r(&[5, 3])], Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2]))),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![r(&[4, 2])], Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        ("slice_cols", vec![r(&[2, 5])], Box::new(|g, v| g.slice_cols(v[0], 2, 3))),
        ("transpose", vec![r(&[2, 3])], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape", vec![r(&[2, 3])], Box::new(|g, v| g.reshape(v[0], vec![3, 2]))),
        ("sum", vec![r(&[2, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "masked_cross_entropy",
            vec![r(&[3, 5])],
            Box::new(|g, v| g.masked_cross_entropy(v[0], &[1, 4, 0], &[true, false, true])),
        ),
    ];
    let mut total = GradCheck {
        coords: 0,
        max_rel_err: 0.0,
        worst: "-".into(),
    };
    for (name, inputs, f) in &cases {
        total.merge(check_op(name, inputs, f.as_ref(), seed)?);
    }
    Ok(total)
}

/// Short samples that fit the tiny configuration: one context example and
/// the query, all on distinct glyph canvases.
pub fn toy_samples(cfg: &ModelConfig, n: usize, k: usize) -> Result<Vec<TokenizedSample>> {
    let mut images = BTreeMap::new();
    let mut triplets = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("toy-{i}");
        let color = i % COLORS.len();
        let glyph = Glyph::ALL[i % Glyph::ALL.len()];
        images.insert(
            id.clone(),
            crate::image::glyph_canvas(cfg.image_size, COLORS[color].1, glyph, [0, 0, 0]),
        );
        triplets.push(Triplet::new(format!("t{i:02}"), vec![id], "hue", COLORS[color].0, Source::VqaLike)?);
    }
    let gcfg = GroupingConfig {
        k_context: k,
        ..Default::default()
    };
    build_context_same_instruction(&triplets, &gcfg)
        .iter()
        .map(|s| pack_sample(s, SuperviseMode::QueryOnly, &images, cfg.max_media_per_sample))
        .collect()
}

fn open_gates<T: Scalar>(model: &mut OtterModel<T>, value: f64) {
    for (i, id) in model.gate_ids().into_iter().enumerate() {
        // distinct values so no two paths are scaled alike
        model.params_mut().get_mut(id).tensor.data_mut()[0] = T::lit(value + 0.05 * i as f64);
    }
}

fn batch_loss_value(model: &OtterModel<f64>, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, batch)?;
    Ok(g.data(l)[0])
}

/// Central differences of the full masked loss at `coords` randomly drawn
/// trainable coordinates, in 64-bit with every gate open.
pub fn model_gradients(seed: u64, coords: usize) -> Result<GradCheck> {
    let cfg = ModelConfig::tiny();
    let mut model = OtterModel::<f64>::new(cfg.clone(), seed)?;
    open_gates(&mut model, 0.5);
    let data = toy_samples(&cfg, 3, 1)?;
    let refs: Vec<&TokenizedSample> = data.iter().take(2).collect();
    let batch = collate_tight(&refs)?;

    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, &batch)?;
    g.backward(l)?;
    model.params_mut().zero_grads();
    model.params_mut().accumulate_grads(&g);

    let used: Vec<usize> = {
        let mut v: Vec<usize> = batch.ids.iter().flatten().map(|&t| t as usize).collect();
        v.sort();
        v.dedup();
        v
    };
    let trainable = model.params().trainable_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/model-coords"));
    let mut out = GradCheck {
        coords: 0,
        max_rel_err: 0.0,
        worst: "-".into(),
    };
    for c in 0..coords {
        let id = trainable[c % trainable.len()];
        let (name, shape, analytic_all) = {
            let p = model.params().get(id);
            (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.grad().map(<[f64]>::to_vec))
        };
        let n: usize = shape.iter().product();
        let j = if name == "tok_embed" {
            // rows of tokens absent from the batch have no gradient to check
            let d = shape[1];
            used.choose(&mut rng).unwrap() * d + rng.random_range(0..d)
        } else {
            rng.random_range(0..n)
        };
        let analytic = analytic_all.map_or(0.0, |g| g[j]);
        let x = model.params().get(id).tensor.data()[j];
        model.params_mut().get_mut(id).tensor.data_mut()[j] = x + FD_EPS;
        let up = batch_loss_value(&model, &batch)?;
        model.params_mut().get_mut(id).tensor.data_mut()[j] = x - FD_EPS;
        let down = batch_loss_value(&model, &batch)?;
        model.params_mut().get_mut(id).tensor.data_mut()[j] = x;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let e = rel_err(analytic, numeric);
        out.coords += 1;
        if e > out.max_rel_err {
            out.max_rel_err = e;
            out.worst = format!("{name}[{j}]");
        }
    }
    Ok(out)
}

// ------------------------------------------------------- freeze contract

fn param_snapshot(model: &OtterModel<f32>) -> BTreeMap<String, Vec<u32>> {
    model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Names of parameters whose bytes differ between two snapshots.
fn changed(a: &BTreeMap<String, Vec<u32>>, b: &BTreeMap<String, Vec<u32>>) -> Vec<String> {
    a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect()
}

/// Trains the tiny model for `steps` optimizer steps and compares every
/// parameter with its initial bytes: parameters outside the trainable
/// prefixes must be untouched, and each trainable group must have moved.
pub fn freeze_invariance(seed: u64, steps: usize, fault: Option<Fault>) -> Result<Verdict> {
    let cfg = ModelConfig::tiny();
    let mut model = OtterModel::<f32>::new(cfg.clone(), seed)?;
    if fault == Some(Fault::UnfreezeVision) {
        model.params_mut().set_frozen_prefix("vision.", false);
    }
    let before = param_snapshot(&model);
    let data = toy_samples(&cfg, 8, 1)?;
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: steps.div_ceil(data.len().div_ceil(4)).max(1),
        seed,
        ..Default::default()
    };
    train(
        &mut model,
        &data,
        &tc,
        TrainOptions {
            stop_after: Some(steps),
            ..Default::default()
        },
    )?;
    let after = param_snapshot(&model);
    let moved = changed(&before, &after);
    let trainable = |n: &str| TRAINABLE_PREFIXES.iter().any(|p| n.starts_with(p));
    let illegal: Vec<&String> = moved.iter().filter(|n| !trainable(n)).collect();
    let still: Vec<&str> = TRAINABLE_PREFIXES
        .iter()
        .copied()
        .filter(|p| !moved.iter().any(|n| n.starts_with(p)))
        .collect();
    if !illegal.is_empty() {
        let shown: Vec<&str> = illegal.iter().take(4).map(|s| s.as_str()).collect();
        return Ok(Err(format!(
            "{} frozen parameters changed after {steps} steps, e.g. {}",
            illegal.len(),
            shown.join(", ")
        )));
    }
    Ok(verdict(
        still.is_empty(),
        if still.is_empty() {
            format!(
                "{steps} steps: {} trainable tensors moved, {} frozen tensors byte-identical",
                moved.len(),
                before.len() - moved.len()
            )
        } else {
            format!("trainable groups never updated: {}", still.join(", "))
        },
    ))
}

// ----------------------------------------------------------------- masks

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// Random training samples with mixed image counts and context sizes.
fn random_samples(seed: u64, n: usize) -> Result<(Vec<TrainingSample>, BTreeMap<String, Image>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/samples"));
    let mut images = BTreeMap::new();
    images.insert("blank".to_string(), Image::blank(16, 16));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(0..=3);
        let mut chunk = |j: usize| {
            let n_img = rng.random_range(1..=2);
            Triplet::new(
                format!("s{i}-{j}"),
                vec!["blank".to_string(); n_img],
                random_text(&mut rng, 6),
                random_text(&mut rng, 5),
                Source::InstructionLike,
            )
        };
        let context = (0..k).map(&mut chunk).collect::<Result<Vec<_>>>()?;
        let query = chunk(k)?;
        out.push(TrainingSample {
            query,
            context,
            heuristic: Heuristic::SameInstruction,
            k,
        });
    }
    Ok((out, images))
}

/// Masks built by packing agree with an independent scanner in both modes,
/// and query-only masks never touch a context chunk.
pub fn mask_scanner(seed: u64, n: usize) -> Result<Verdict> {
    let (samples, images) = random_samples(seed, n)?;
    for s in &samples {
        for (mode, query_only) in [(SuperviseMode::QueryOnly, true), (SuperviseMode::AllAnswers, false)] {
            let p = pack_sample(s, mode, &images, 16)?;
            if p.supervision_mask != oracle::scan_supervision(&p.ids, query_only) {
                return Ok(Err(format!("{mode:?} mask of `{}` disagrees with the scanner", p.id)));
            }
            if query_only {
                let last_context_end = p
                    .ids
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t == END_OF_CHUNK)
                    .nth(s.k.wrapping_sub(1))
                    .map_or(0, |(i, _)| i + 1);
                if s.k > 0 && p.supervision_mask[..last_context_end].iter().any(|&m| m) {
                    return Ok(Err(format!("query-only mask of `{}` supervises context", p.id)));
                }
            }
            if p.ids.iter().filter(|&&t| t == END_OF_CHUNK).count() != s.k + 1 {
                return Ok(Err(format!("`{}` does not have k + 1 chunks", p.id)));
            }
        }
    }
    Ok(Ok(format!("{} samples, both supervision modes", samples.len())))
}

/// Replacing targets at unsupervised positions leaves the loss bit-identical.
pub fn mask_isolation(seed: u64) -> Result<Verdict> {
    let cfg = ModelConfig::tiny();
    let mut model = OtterModel::<f32>::new(cfg.clone(), seed)?;
    open_gates(&mut model, 0.3);
    let data = toy_samples(&cfg, 4, 1)?;
    let refs: Vec<&TokenizedSample> = data.iter().collect();
    let batch = collate_tight(&refs)?;
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &batch)?;
    let (targets, mask) = shifted_targets(&batch);
    let base = g.masked_cross_entropy(logits, &targets, &mask)?;
    let base = g.data(base)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/isolation"));
    for trial in 0..10 {
        let mut t2 = targets.clone();
        for (t, &m) in t2.iter_mut().zip(&mask) {
            if !m {
                *t = rng.random_range(0..10_000);
            }
        }
        let l = g.masked_cross_entropy(logits, &t2, &mask)?;
        let v = g.data(l)[0];
        if v.to_bits() != base.to_bits() {
            return Ok(Err(format!("trial {trial}: loss {v} != {base}")));
        }
    }
    Ok(Ok(format!(
        "loss {base:.6} unchanged under 10 rewrites of {} unsupervised targets",
        mask.iter().filter(|&&m| !m).count()
    )))
}

// --------------------------------------------------------- conditioning

/// With every gate at zero, conditioning on media changes nothing.
pub fn gate_zero_identity(seed: u64) -> Result<Verdict> {
    let cfg = ModelConfig::tiny();
    let model = OtterModel::<f32>::new(cfg.clone(), seed)?;
    let mut worst = 0.0f64;
    for s in toy_samples(&cfg, 3, 1)? {
        let with = model.logits(&s.ids, Some((&s.media, &s.media_locations)))?;
        let without = model.logits(&s.ids, None)?;
        for (a, b) in with.data().iter().zip(without.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Ok(verdict(worst <= 1e-6, format!("max |Δlogit| {worst:.1e}")))
}

/// The cross-attention mask equals the brute-force routing oracle.
pub fn locality_mask(seed: u64, patterns: usize) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/locality"));
    let n_latents = 3;
    for p in 0..patterns {
        let t = rng.random_range(1..=48);
        let ids: Vec<u32> = (0..t)
            .map(|_| if rng.random_bool(0.15) { IMAGE } else { rng.random_range(0..256) })
            .collect();
        let routes = oracle::routing(&ids);
        let locs = MediaLocations::from_ids(&ids, IMAGE);
        if locs.as_slice() != routes.as_slice() {
            return Ok(Err(format!("pattern {p}: locations {:?} != {:?}", locs.as_slice(), routes)));
        }
        let n_media = ids.iter().filter(|&&x| x == IMAGE).count();
        let mask = locs.cross_attention_mask(n_media, n_latents);
        let width = n_media * n_latents;
        for (pos, route) in routes.iter().enumerate() {
            for col in 0..width {
                if mask[pos * width + col] != (*route == Some(col / n_latents)) {
                    return Ok(Err(format!("pattern {p}: position {pos}, column {col}")));
                }
            }
        }
    }
    Ok(Ok(format!("{patterns} random patterns")))
}

fn rows_equal(a: &[f64], b: &[f64], v: usize, rows: std::ops::Range<usize>) -> bool {
    rows.clone().all(|r| a[r * v..(r + 1) * v] == b[r * v..(r + 1) * v])
}

/// In 64-bit with open gates: changing a token or an image leaves every
/// earlier position's logits bit-identical, and does change later ones.
pub fn causality(seed: u64) -> Result<Verdict> {
    let cfg = ModelConfig::tiny();
    let v = cfg.vocab_size;
    let mut model = OtterModel::<f64>::new(cfg.clone(), seed)?;
    open_gates(&mut model, 0.6);
    let s = toy_samples(&cfg, 3, 1)?.remove(0);
    let base = model.logits(&s.ids, Some((&s.media, &s.media_locations)))?;
    let t = s.ids.len();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/causality"));
    for _ in 0..5 {
        let p = loop {
            let p = rng.random_range(1..t);
            if s.ids[p] < 256 {
                break p;
            }
        };
        let mut ids = s.ids.clone();
        ids[p] = (ids[p] + 1 + rng.random_range(0..200)) % 256;
        let out = model.logits(&ids, Some((&s.media, &s.media_locations)))?;
        if !rows_equal(base.data(), out.data(), v, 0..p) {
            return Ok(Err(format!("token change at {p} leaked to an earlier position")));
        }
        if rows_equal(base.data(), out.data(), v, p..t) {
            return Ok(Err(format!("token change at {p} had no effect")));
        }
    }

    let second = s.ids.iter().enumerate().filter(|(_, &x)| x == IMAGE).nth(1).map(|(i, _)| i);
    let Some(second) = second else {
        return Ok(Err("sample lacks a second image".into()));
    };
    let mut media = s.media.clone();
    let img = &mut media[1];
    for y in 0..img.height {
        for x in 0..img.width {
            let [r, g, b] = img.get(x, y);
            img.set(x, y, [255 - r, g / 2, b ^ 0x5a]);
        }
    }
    let out = model.logits(&s.ids, Some((&media, &s.media_locations)))?;
    if !rows_equal(base.data(), out.data(), v, 0..second) {
        return Ok(Err("second image leaked before its [image] token".into()));
    }
    if rows_equal(base.data(), out.data(), v, second..t) {
        return Ok(Err("second image had no effect".into()));
    }
    Ok(Ok(format!("5 token perturbations and 1 image perturbation over {t} positions")))
}

// ------------------------------------------------------------ heuristics

fn keys(samples: &[TrainingSample]) -> Vec<oracle::SampleKey> {
    let mut v: Vec<oracle::SampleKey> = samples
        .iter()
        .map(|s| (s.query.id.clone(), s.heuristic, s.context.iter().map(|t| t.id.clone()).collect()))
        .collect();
    v.sort();
    v
}

/// Each heuristic and the assembled dataset agree with the brute-force
/// enumerators on random corpora of at most 50 triplets.
pub fn heuristic_oracles(seed: u64, corpora: usize) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/heuristics"));
    let mut total = 0;
    for c in 0..corpora {
        let n = rng.random_range(0..=50);
        let triplets = random_corpus(rng.random(), n);
        let cfg = GroupingConfig {
            k_context: rng.random_range(0..=3),
            seed: rng.random(),
            max_samples_per_group: rng.random_range(1..=6),
            ..Default::default()
        };
        for h in Heuristic::ALL {
            let got = keys(&build_context(&triplets, &cfg, h)?);
            let want = match h {
                Heuristic::SameInstruction => oracle::same_instruction(&triplets, &cfg),
                Heuristic::SameImage => oracle::same_image(&triplets, &cfg),
                Heuristic::Sequential => oracle::sequential(&triplets, &cfg),
            };
            if got != want {
                return Ok(Err(format!(
                    "corpus {c} ({n} triplets, k={}): {} differs from the oracle",
                    cfg.k_context,
                    h.as_str()
                )));
            }
            total += got.len();
        }
        let subset: Vec<Heuristic> = loop {
            let s: Vec<Heuristic> = Heuristic::ALL.into_iter().filter(|_| rng.random_bool(0.6)).collect();
            if !s.is_empty() {
                break s;
            }
        };
        let got = keys(&assemble_dataset(&triplets, &cfg, &subset)?);
        if got != oracle::assemble(&triplets, &cfg, &subset) {
            return Ok(Err(format!("corpus {c}: assembled dataset differs from the oracle")));
        }
    }
    Ok(Ok(format!("{corpora} corpora, {total} samples")))
}
