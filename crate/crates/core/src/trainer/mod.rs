//! Optimization over the trainable parameters: cosine-annealed AdamW with
//! global-norm clipping, per-epoch checkpoints and exact resume.

mod checkpoint;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OtterModel;
use crate::seqformat::{collate, SuperviseMode, TokenizedSample};
use crate::seqformat::tokenizer::PAD;
use crate::tensor::{Graph, ParamStore, Scalar};
use crate::util::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Cursor, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub schedule: Schedule,
    pub min_lr: f64,
    pub seed: u64,
    pub supervise: SuperviseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 4,
            epochs: 6,
            clip_norm: 1.0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            schedule: Schedule::Cosine,
            min_lr: 0.0,
            seed: 0,
            supervise: SuperviseMode::QueryOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.min_lr < 0.0 || self.min_lr > self.lr {
            return bad("eps must be positive and 0 <= min_lr <= lr, weight_decay >= 0");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_samples)
    }
}

/// `min_lr + ½(base − min_lr)(1 + cos(π·step/total))`
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    let step = step.min(total_steps);
    let frac = step as f64 / total_steps as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (PI * frac).cos()))
}

pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `clip_norm`
/// and returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], clip_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm <= clip_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = clip_norm / norm;
    let f = T::lit(factor);
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= f);
    }
    factor
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.betas.0,
            beta2: c.betas.1,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of a flat buffer at step `t` (1-based).
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    h: &AdamWHyper,
) {
    let b1 = T::lit(h.beta1);
    let b2 = T::lit(h.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - h.beta1.powf(t as f64));
    let bc2 = T::lit(1.0 - h.beta2.powf(t as f64));
    let lr = T::lit(lr);
    let eps = T::lit(h.eps);
    let wd = T::lit(h.weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// First and second moments for every trainable parameter, in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub t: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let moments = params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = params.get(id);
                Moments {
                    name: p.name.clone(),
                    m: vec![T::zero(); p.tensor.numel()],
                    v: vec![T::zero(); p.tensor.numel()],
                }
            })
            .collect();
        Self { t: 0, moments }
    }

    fn check_alignment(&self, params: &ParamStore<T>) -> Result<()> {
        let ids = params.trainable_ids();
        if ids.len() != self.moments.len() {
            return Err(Error::State(format!(
                "{} moment buffers for {} trainable parameters",
                self.moments.len(),
                ids.len()
            )));
        }
        for (id, mo) in ids.into_iter().zip(&self.moments) {
            let p = params.get(id);
            if p.name != mo.name || p.tensor.numel() != mo.m.len() || mo.m.len() != mo.v.len() {
                return Err(Error::State(format!(
                    "moment buffer `{}` ({} values) does not match parameter `{}` ({} values)",
                    mo.name,
                    mo.m.len(),
                    p.name,
                    p.tensor.numel()
                )));
            }
        }
        Ok(())
    }
}

/// Applies one AdamW step to every trainable parameter using its stored
/// gradient (missing gradients count as zero). Frozen parameters are never
/// touched.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    h: &AdamWHyper,
) -> Result<()> {
    state.check_alignment(params)?;
    state.t += 1;
    let t = state.t;
    for (id, mo) in params.trainable_ids().into_iter().zip(&mut state.moments) {
        let tensor = &mut params.get_mut(id).tensor;
        let grad = tensor
            .grad()
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        adamw_update(tensor.data_mut(), &grad, &mut mo.m, &mut mo.v, t, lr, h);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss,grad_norm,clip_factor";

impl LogRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss, self.grad_norm, self.clip_factor
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Parse {
            line: 0,
            message: format!("bad log row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            loss: f[3].parse().map_err(|_| bad())?,
            grad_norm: f[4].parse().map_err(|_| bad())?,
            clip_factor: f[5].parse().map_err(|_| bad())?,
        })
    }
}

pub fn log_to_csv(records: &[LogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Order in which epoch `epoch` visits the dataset.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Extra knobs for a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where per-epoch (`epoch-NNNN`) and `final` checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this state instead of starting fresh.
    pub resume: Option<(AdamWState<f32>, Cursor)>,
    /// Stop after this many global steps (for interrupted-run tests).
    pub stop_after: Option<usize>,
    pub on_step: Option<&'a mut dyn FnMut(&LogRecord)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub state: AdamWState<f32>,
    pub cursor: Cursor,
}

/// Mean masked loss and parameter gradients of one batch, accumulated into
/// the store. Returns the loss.
pub fn batch_step<T: Scalar>(model: &mut OtterModel<T>, batch: &[&TokenizedSample]) -> Result<f64> {
    let max_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_len > model.config().max_seq_len {
        return Err(Error::Truncation {
            len: max_len,
            max_len: model.config().max_seq_len,
        });
    }
    let collated = collate(batch, max_len, PAD)?;
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, &collated)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    model.params_mut().accumulate_grads(&g);
    Ok(value)
}

/// Runs `epochs × ⌈N/batch_size⌉` optimizer steps over `data`.
pub fn train(
    model: &mut OtterModel<f32>,
    data: &[TokenizedSample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = cfg.total_steps(data.len());
    let hyper = AdamWHyper::from(cfg);
    let (mut state, mut cursor) = match opts.resume.take() {
        Some((s, c)) => {
            if c.n_samples != data.len() {
                return Err(Error::State(format!(
                    "checkpoint was taken over {} samples, dataset has {}",
                    c.n_samples,
                    data.len()
                )));
            }
            (s, c)
        }
        None => (
            AdamWState::new(model.params()),
            Cursor {
                step: 0,
                n_samples: data.len(),
            },
        ),
    };
    state.check_alignment(model.params())?;

    let mut log = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    while cursor.step < total {
        if opts.stop_after.is_some_and(|s| cursor.step >= s) {
            break;
        }
        let step = cursor.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, data.len());
            order_epoch = epoch;
        }
        let within = step % per_epoch;
        let idx = &order[within * cfg.batch_size..((within + 1) * cfg.batch_size).min(data.len())];
        let batch: Vec<&TokenizedSample> = idx.iter().map(|&i| &data[i]).collect();

        model.params_mut().zero_grads();
        let loss = batch_step(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                samples: idx.to_vec(),
            });
        }
        let lr = cosine_lr(step, total, cfg)?;
        let (grad_norm, clip_factor) = {
            let params = model.params_mut();
            let ids = params.trainable_ids();
            let mut grads: Vec<Vec<f32>> = ids
                .iter()
                .map(|&id| params.get(id).tensor.grad().map(<[f32]>::to_vec).unwrap_or_default())
                .collect();
            let norm = global_norm(&grads.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let mut views: Vec<&mut [f32]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
            let factor = clip_global_norm(&mut views, cfg.clip_norm);
            if factor != 1.0 {
                for (&id, g) in ids.iter().zip(&grads) {
                    if let Some(buf) = params.get_mut(id).tensor.grad_mut() {
                        buf.copy_from_slice(g);
                    }
                }
            }
            (norm, factor)
        };
        adamw_step(model.params_mut(), &mut state, lr, &hyper)?;
        cursor.step += 1;

        let rec = LogRecord {
            step,
            epoch,
            lr,
            loss,
            grad_norm,
            clip_factor,
        };
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&rec);
        }
        log.push(rec);

        if let Some(dir) = &opts.checkpoint_dir {
            if cursor.step % per_epoch == 0 {
                let name = if cursor.step == total {
                    "final".to_string()
                } else {
                    format!("epoch-{:04}", cursor.step / per_epoch)
                };
                save_checkpoint(&dir.join(name), model, &state, cfg, &cursor)?;
            }
        }
    }
    model.params_mut().zero_grads();
    Ok(TrainOutcome { log, state, cursor })
}
