//! The run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use otter_core::evalgen::DecodeConfig;
use otter_core::mimicit::{GroupingConfig, Heuristic};
use otter_core::model::ModelConfig;
use otter_core::trainer::TrainConfig;

/// Environment variable that relocates every output directory.
pub const OUT_DIR_ENV: &str = "OTTER_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub images: PathBuf,
    pub shards: PathBuf,
    pub checkpoints: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data/triplets.jsonl".into(),
            images: "data/images".into(),
            shards: "out/shards".into(),
            checkpoints: "out/checkpoints".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub heuristics: Vec<String>,
    pub shard_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            heuristics: Heuristic::ALL.iter().map(|h| h.as_str().to_string()).collect(),
            shard_size: 256,
        }
    }
}

impl DataConfig {
    pub fn heuristics(&self) -> Result<Vec<Heuristic>> {
        self.heuristics
            .iter()
            .map(|s| Heuristic::parse(s).with_context(|| format!("unknown heuristic `{s}`")))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the model initialization.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub grouping: GroupingConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `file` (or starts from defaults) and applies overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grouping.validate()?;
        self.train.validate()?;
        self.data.heuristics()?;
        if self.data.shard_size == 0 {
            bail!("data.shard_size must be positive");
        }
        Ok(())
    }

    /// Resolves every path against `root`; outputs move under the
    /// `OTTER_OUT_DIR` directory when that is set.
    pub fn resolve(&mut self, root: &Path, out_dir: Option<PathBuf>) {
        let p = &mut self.paths;
        p.data = root.join(&p.data);
        p.images = root.join(&p.images);
        match out_dir {
            Some(out) => {
                p.shards = out.join("shards");
                p.checkpoints = out.join("checkpoints");
            }
            None => {
                p.shards = root.join(&p.shards);
                p.checkpoints = root.join(&p.checkpoints);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
