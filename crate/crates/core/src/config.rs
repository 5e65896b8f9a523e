//! Experiment configuration files (TOML). The schema is documented in
//! `docs/config.md`.
//!
//! A `[defaults]` table holds training settings shared by every `[[run]]`;
//! a run's own keys override them, with nested tables (`optim`, `rl`,
//! `model`) merged key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{GilError, Result};
use crate::gil::{TrainConfig, Variant};
use crate::missingness::MaskSpec;
use crate::synthetic::{SyntheticMnarSpec, SyntheticSequenceSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Binary task whose missingness pattern is informative. `seed`
    /// defaults to the run seed.
    SyntheticMnar {
        #[serde(default = "default_n_tabular")]
        n: usize,
        #[serde(default = "default_d_tabular")]
        d: usize,
        #[serde(default = "default_mask_signal")]
        mask_signal: f64,
        #[serde(default = "default_value_signal")]
        value_signal: f64,
        seed: Option<u64>,
    },
    SyntheticSequences {
        #[serde(default = "default_n_seq")]
        n: usize,
        #[serde(default = "default_d_seq")]
        d: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default = "default_signal")]
        signal: f64,
        seed: Option<u64>,
    },
    /// IDX files named `train-images-idx3-ubyte` and so on inside `dir`.
    /// The first `train_limit` training and `test_limit` test images are
    /// used; the test files serve as the evaluation split.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_n_tabular() -> usize {
    SyntheticMnarSpec::default().n
}
fn default_d_tabular() -> usize {
    SyntheticMnarSpec::default().d
}
fn default_mask_signal() -> f64 {
    SyntheticMnarSpec::default().mask_signal
}
fn default_value_signal() -> f64 {
    SyntheticMnarSpec::default().value_signal
}
fn default_n_seq() -> usize {
    SyntheticSequenceSpec::default().n
}
fn default_d_seq() -> usize {
    SyntheticSequenceSpec::default().d
}
fn default_horizon() -> usize {
    SyntheticSequenceSpec::default().horizon
}
fn default_signal() -> f64 {
    SyntheticSequenceSpec::default().signal
}

impl DatasetSpec {
    pub fn is_sequential(&self) -> bool {
        matches!(self, DatasetSpec::SyntheticSequences { .. })
    }

    fn resolve_paths(&mut self, base: &Path) {
        match self {
            DatasetSpec::Mnist { dir, .. } => *dir = base.join(&*dir),
            DatasetSpec::Csv { path, .. } => *path = base.join(&*path),
            _ => {}
        }
    }
}

/// One named run, expanded over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub mask: MaskSpec,
    /// Held-out fraction when the dataset has no separate test split.
    pub test_fraction: f64,
    pub out_dir: PathBuf,
    /// Write the final network of every run as `model.ckpt`.
    #[serde(default)]
    pub save_checkpoints: bool,
    pub runs: Vec<RunSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetSpec,
    #[serde(default)]
    mask: MaskSpec,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    #[serde(default)]
    save_checkpoints: bool,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    defaults: Table,
    #[serde(default, rename = "run")]
    runs: Vec<Table>,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn merge(base: &Table, over: &Table) -> Table {
    let mut out = base.clone();
    for (k, v) in over {
        match (out.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                let merged = merge(b, o);
                *b = merged;
            }
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}

impl ExperimentConfig {
    /// Parse config text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| GilError::config(e.to_string()))?;
        let mut dataset = raw.dataset;
        dataset.resolve_paths(base_dir);
        if raw.runs.is_empty() {
            return Err(GilError::config("at least one [[run]] is required"));
        }
        let mut runs = Vec::with_capacity(raw.runs.len());
        for (i, table) in raw.runs.iter().enumerate() {
            let mut table = merge(&raw.defaults, table);
            let name = match table.remove("name") {
                Some(Value::String(s)) if !s.is_empty() => s,
                Some(_) => return Err(GilError::config(format!("run {}: name must be a non-empty string", i + 1))),
                None => return Err(GilError::config(format!("run {}: missing name", i + 1))),
            };
            if !table.contains_key("variant") {
                return Err(GilError::config(format!("run {name:?}: every run must name a variant")));
            }
            let seeds = match table.remove("seeds") {
                Some(v) => v.try_into::<Vec<u64>>().map_err(|e| GilError::config(format!("run {name:?}: seeds: {e}")))?,
                None => raw.seeds.clone().ok_or_else(|| GilError::config(format!("run {name:?}: no seeds given")))?,
            };
            if seeds.is_empty() {
                return Err(GilError::config(format!("run {name:?}: seeds must not be empty")));
            }
            if table.contains_key("seed") {
                return Err(GilError::config(format!("run {name:?}: use `seeds`, not `seed`")));
            }
            let train: TrainConfig =
                Value::Table(table).try_into().map_err(|e| GilError::config(format!("run {name:?}: {e}")))?;
            train.validate().map_err(|e| GilError::config(format!("run {name:?}: {e}")))?;
            runs.push(RunSpec { name, seeds, train });
        }
        let mut names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(GilError::config(format!("duplicate run name {:?}", w[0])));
        }
        let cfg = ExperimentConfig {
            dataset,
            mask: raw.mask,
            test_fraction: raw.test_fraction,
            out_dir: base_dir.join(raw.out_dir),
            save_checkpoints: raw.save_checkpoints,
            runs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GilError::load(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            GilError::Config(msg) => GilError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(GilError::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        let seq = self.dataset.is_sequential();
        for run in &self.runs {
            let lstm = matches!(run.train.model, crate::gil::ModelSpec::Lstm { .. });
            if lstm != seq {
                return Err(GilError::config(format!(
                    "run {:?}: {} model on {} data",
                    run.name,
                    if lstm { "an lstm" } else { "an mlp" },
                    if seq { "sequence" } else { "tabular" }
                )));
            }
            if lstm && run.train.variant == Variant::AblationInput {
                return Err(GilError::config(format!("run {:?}: ablation_input needs an mlp", run.name)));
            }
            if !seq && run.train.variant == Variant::Baseline && run.train.imputer == crate::gil::Imputer::CarryForward {
                return Err(GilError::config(format!("run {:?}: carry_forward needs sequence data", run.name)));
            }
        }
        Ok(())
    }

    /// Replace every run's seeds by `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        for r in &mut self.runs {
            r.seeds = vec![seed];
        }
    }
}
