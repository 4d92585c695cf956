use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapSite};
use crate::optim::{OptimizerConfig, ScheduleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    FileBytes {
        path: PathBuf,
    },
    SyntheticMarkov {
        states: usize,
        temperature: f64,
        vocab: usize,
        zipf: f64,
        /// Corpus length in tokens.
        #[serde(default = "default_length")]
        length: usize,
    },
}

fn default_length() -> usize {
    200_000
}

impl DatasetSpec {
    pub fn vocab(&self) -> usize {
        match self {
            DatasetSpec::FileBytes { .. } => 256,
            DatasetSpec::SyntheticMarkov { vocab, .. } => *vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::SyntheticMarkov {
            states,
            temperature,
            vocab,
            zipf,
            ..
        } = *self
        {
            if states == 0 || vocab < 2 {
                return Err(Error::Config(format!("synthetic corpus needs states ≥ 1 and vocab ≥ 2, got {states} and {vocab}")));
            }
            if !(temperature >= 0.0 && temperature.is_finite()) || !(zipf >= 0.0 && zipf.is_finite()) {
                return Err(Error::Config("temperature and zipf must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub model: u64,
    #[serde(default)]
    pub data: u64,
    /// Picks the probe and evaluation batches.
    #[serde(default)]
    pub aux: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 0, data: 0, aux: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Moment-update decomposition at one tap site, recorded every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub layer: usize,
    pub site: TapSite,
    /// Warn when first-moment momentum is enabled.
    #[serde(default = "yes")]
    pub strict: bool,
}

fn yes() -> bool {
    true
}
fn d_batch() -> usize {
    32
}
fn d_seq() -> usize {
    64
}
fn d_tap() -> u64 {
    25
}
fn d_clip() -> f64 {
    1.0
}
fn d_eval() -> usize {
    4
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    pub steps: u64,
    #[serde(default = "d_tap")]
    pub tap_interval: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub clip: f64,
    /// 0 keeps only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default = "d_eval")]
    pub eval_batches: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path`, apply `key=value` overrides in order, then validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override_str(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Schedule with its step count filled in.
    pub fn schedule_spec(&self) -> ScheduleSpec {
        let mut s = self.schedule;
        if s.total_steps == 0 {
            s.total_steps = self.steps;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule_spec().validate()?;
        self.dataset.validate()?;
        if self.tap_interval == 0 {
            return Err(Error::Config("tap_interval must be at least 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch_size, seq_len and eval_batches must be positive".into()));
        }
        if self.seq_len > self.model.context {
            return Err(Error::Config(format!(
                "seq_len {} exceeds model context {}",
                self.seq_len, self.model.context
            )));
        }
        if self.dataset.vocab() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "dataset vocab {} differs from model vocab {}",
                self.dataset.vocab(),
                self.model.vocab_size
            )));
        }
        if !(self.clip >= 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip {} must be finite and non-negative", self.clip)));
        }
        if let Some(p) = self.probe {
            let ok = match p.site {
                TapSite::UnembedInput => p.layer == self.model.depth,
                _ => p.layer < self.model.depth,
            };
            if !ok {
                return Err(Error::Config(format!("probe layer {} invalid for site {}", p.layer, p.site.as_str())));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value`.
pub fn apply_override_str(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not key=value")))?;
    apply_override(root, key.trim(), parse_override_value(raw.trim()))
}

/// Set the value at dotted path `key`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("malformed override key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Parse(format!("override `{key}`: `{p}` is not inside a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Parse(format!("override `{key}` does not address a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// One named set of overrides in an experiment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixVariant {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

/// Cartesian product of variants and seeds over a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    /// Base config, relative to the matrix file.
    pub base: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(rename = "variant")]
    pub variants: Vec<MatrixVariant>,
}

impl MatrixSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: MatrixSpec = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if spec.base.is_relative() {
            if let Some(parent) = path.parent() {
                spec.base = parent.join(&spec.base);
            }
        }
        Ok(spec)
    }

    /// Expanded run configs, named `{variant}-s{seed}`. Each seed sets the
    /// model, data and aux seeds together.
    pub fn expand(&self) -> Result<Vec<(String, RunConfig)>> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("matrix needs at least one seed and one variant".into()));
        }
        let text = std::fs::read_to_string(&self.base).map_err(|e| Error::io(&self.base, e))?;
        let base: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", self.base.display())))?;
        let mut out = Vec::new();
        for v in &self.variants {
            for &seed in &self.seeds {
                let mut value = base.clone();
                for (k, val) in &v.set {
                    apply_override(&mut value, k, val.clone())?;
                }
                let name = format!("{}-s{seed}", v.name);
                let mut cfg = RunConfig::from_value(value)?;
                cfg.seeds = Seeds {
                    model: seed,
                    data: seed,
                    aux: seed,
                };
                cfg.out_dir = self.out_dir.join(&name);
                out.push((name, cfg));
            }
        }
        Ok(out)
    }
}
