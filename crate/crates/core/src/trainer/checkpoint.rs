//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   config, cursor, parameter and optimizer index
//! <dir>/params.bin      every parameter (frozen included), name order, f32 LE
//! <dir>/optimizer.bin   per trainable parameter: m then v, name order, f32 LE
//! ```
//!
//! Offsets in the manifest are byte offsets into the blob. Every parameter
//! carries its own SHA-256; the optimizer blob carries one for the whole file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamWState, Moments, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OtterModel};
use crate::util::sha256_hex;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "otter-checkpoint";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";

/// Position in the training run: optimizer steps already taken and the
/// dataset size they were taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub step: usize,
    pub n_samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: u64,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerIndex {
    t: u64,
    file: String,
    sha256: String,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model_config: ModelConfig,
    model_seed: u64,
    train_config: TrainConfig,
    cursor: Cursor,
    params_file: String,
    params: Vec<ParamEntry>,
    optimizer: OptimizerIndex,
}

pub struct Checkpoint {
    pub model: OtterModel<f32>,
    pub state: AdamWState<f32>,
    pub train_config: TrainConfig,
    pub cursor: Cursor,
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    model: &OtterModel<f32>,
    state: &AdamWState<f32>,
    train_config: &TrainConfig,
    cursor: &Cursor,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let store = model.params();

    let mut blob = Vec::with_capacity(store.total_elements() * 4);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids_by_name() {
        let p = store.get(id);
        let start = blob.len();
        push_f32(&mut blob, p.tensor.data());
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen(),
            offset: start as u64,
            bytes: (blob.len() - start) as u64,
            sha256: sha256_hex(&blob[start..]),
        });
    }

    let mut opt = Vec::new();
    let mut moments = Vec::with_capacity(state.moments.len());
    for mo in &state.moments {
        moments.push(MomentEntry {
            name: mo.name.clone(),
            offset: opt.len() as u64,
            len: mo.m.len() as u64,
        });
        push_f32(&mut opt, &mo.m);
        push_f32(&mut opt, &mo.v);
    }

    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model_config: model.config().clone(),
        model_seed: model.seed(),
        train_config: train_config.clone(),
        cursor: *cursor,
        params_file: PARAMS.into(),
        params,
        optimizer: OptimizerIndex {
            t: state.t,
            file: OPTIMIZER.into(),
            sha256: sha256_hex(&opt),
            moments,
        },
    };
    fs::write(dir.join(PARAMS), &blob)?;
    fs::write(dir.join(OPTIMIZER), &opt)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&mpath, format!("not a checkpoint (format `{}`)", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                manifest.version
            ),
        ));
    }

    let mut model = OtterModel::<f32>::new(manifest.model_config.clone(), manifest.model_seed)?;
    let ppath = dir.join(&manifest.params_file);
    let blob = fs::read(&ppath)?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::format(
            &ppath,
            format!(
                "{} parameters stored, model has {}",
                manifest.params.len(),
                model.params().len()
            ),
        ));
    }
    for e in &manifest.params {
        let id = model
            .params()
            .id(&e.name)
            .ok_or_else(|| Error::format(&ppath, format!("unknown parameter `{}`", e.name)))?;
        let start = e.offset as usize;
        let end = start + e.bytes as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::format(&ppath, format!("`{}` lies outside the blob", e.name)))?;
        if sha256_hex(bytes) != e.sha256 {
            return Err(Error::format(&ppath, format!("checksum mismatch for `{}`", e.name)));
        }
        let p = model.params_mut().get_mut(id);
        if p.tensor.shape() != e.shape.as_slice() || bytes.len() != p.tensor.numel() * 4 {
            return Err(Error::format(&ppath, format!("shape mismatch for `{}`", e.name)));
        }
        p.tensor.data_mut().copy_from_slice(&read_f32(bytes));
        p.set_frozen(e.frozen);
    }

    let opath = dir.join(&manifest.optimizer.file);
    let opt = fs::read(&opath)?;
    if sha256_hex(&opt) != manifest.optimizer.sha256 {
        return Err(Error::format(&opath, "checksum mismatch"));
    }
    let mut moments = Vec::with_capacity(manifest.optimizer.moments.len());
    for e in &manifest.optimizer.moments {
        let start = e.offset as usize;
        let n = e.len as usize * 4;
        let m = opt
            .get(start..start + n)
            .ok_or_else(|| Error::format(&opath, format!("`{}` lies outside the blob", e.name)))?;
        let v = opt
            .get(start + n..start + 2 * n)
            .ok_or_else(|| Error::format(&opath, format!("`{}` lies outside the blob", e.name)))?;
        moments.push(Moments {
            name: e.name.clone(),
            m: read_f32(m),
            v: read_f32(v),
        });
    }
    let state = AdamWState {
        t: manifest.optimizer.t,
        moments,
    };
    state.check_alignment(model.params())?;
    Ok(Checkpoint {
        model,
        state,
        train_config: manifest.train_config,
        cursor: manifest.cursor,
    })
}
