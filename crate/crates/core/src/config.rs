//! Flat `key=value` run configuration with dotted sections:
//!
//! ```text
//! # comments and blank lines are ignored
//! dataset.path=out/dataset.bin
//! output.dir=runs/garden
//! model.d=128
//! run.seeds=0,1,2
//! ```
//!
//! `dataset.path` and `output.dir` are required; everything else has a
//! default, and [`RunConfig::resolved`] lists every key with its value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Dataset, Format, Split, DEFAULT_K_CORE};
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::model::ModelConfig;
use crate::series::GainAxis;
use crate::training::TrainConfig;

/// How `dataset.path` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Output of the preprocess step.
    Canonical,
    /// A raw log, preprocessed on load.
    Raw(Format),
}

impl DatasetFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(DatasetFormat::Canonical),
            other => Format::parse(other).map(DatasetFormat::Raw),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Canonical => "canonical",
            DatasetFormat::Raw(f) => f.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub dataset_format: DatasetFormat,
    pub k_core: usize,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_split: Split,
    pub eval: EvalOptions,
}

const META_SEED: &str = "meta.seed";
const META_USERS: &str = "meta.n_users";
const META_ITEMS: &str = "meta.n_items";

/// Checks that a dataset has the dimensions recorded in checkpoint metadata.
pub fn check_meta_dimensions(meta: &BTreeMap<String, String>, dataset: &Dataset) -> Result<()> {
    for (key, actual) in [(META_USERS, dataset.n_users), (META_ITEMS, dataset.n_items)] {
        if let Some(v) = meta.get(key) {
            if v.parse::<usize>().ok() != Some(actual) {
                return Err(Error::Dimension(format!(
                    "checkpoint was trained with {key}={v}, dataset has {actual}"
                )));
            }
        }
    }
    Ok(())
}

const KEYS: &[&str] = &[
    "dataset.path",
    "dataset.format",
    "dataset.k_core",
    "output.dir",
    "run.seeds",
    "model.d",
    "model.s_days",
    "model.k",
    "model.disable_ctx",
    "model.disable_his",
    "model.disable_fusion",
    "model.literal_update",
    "model.gain_axis",
    "model.fusion_bias",
    "train.lr",
    "train.weight_decay",
    "train.lr_decay_factor",
    "train.lr_decay_period",
    "train.n_tbptt",
    "train.n_neg",
    "train.max_epochs",
    "train.patience",
    "eval.split",
    "eval.filter_seen",
];

/// Parses `key=value` lines into a map; later duplicates win.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

fn required<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    match map.get(key) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::MissingField(key.to_string())),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &[])
    }

    /// Loads `path`, then applies `key=value` overrides on top.
    pub fn load_with(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = parse_pairs(&std::fs::read_to_string(path)?)?;
        map.extend(overrides.iter().cloned());
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        let dm = ModelConfig::default();
        let dt = TrainConfig::default();
        let seeds: Vec<u64> = required_or(map, "run.seeds", "0")
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("run.seeds must be a comma-separated list of integers".into()))?;
        if seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        let model = ModelConfig {
            d: value(map, "model.d", dm.d)?,
            s_days: value(map, "model.s_days", dm.s_days)?,
            k: value(map, "model.k", dm.k)?,
            disable_ctx: value(map, "model.disable_ctx", dm.disable_ctx)?,
            disable_his: value(map, "model.disable_his", dm.disable_his)?,
            disable_fusion: value(map, "model.disable_fusion", dm.disable_fusion)?,
            literal_update: value(map, "model.literal_update", dm.literal_update)?,
            gain_axis: match map.get("model.gain_axis") {
                Some(v) => GainAxis::parse(v)?,
                None => dm.gain_axis,
            },
            fusion_bias: value(map, "model.fusion_bias", dm.fusion_bias)?,
        };
        model.validate()?;
        let train = TrainConfig {
            lr: value(map, "train.lr", dt.lr)?,
            weight_decay: value(map, "train.weight_decay", dt.weight_decay)?,
            lr_decay_factor: value(map, "train.lr_decay_factor", dt.lr_decay_factor)?,
            lr_decay_period: value(map, "train.lr_decay_period", dt.lr_decay_period)?,
            n_tbptt: value(map, "train.n_tbptt", dt.n_tbptt)?,
            n_neg: value(map, "train.n_neg", dt.n_neg)?,
            max_epochs: value(map, "train.max_epochs", dt.max_epochs)?,
            patience: value(map, "train.patience", dt.patience)?,
            seed: seeds[0],
        };
        train.validate()?;
        Ok(RunConfig {
            dataset_path: PathBuf::from(required(map, "dataset.path")?),
            dataset_format: DatasetFormat::parse(required_or(map, "dataset.format", "canonical"))?,
            k_core: value(map, "dataset.k_core", DEFAULT_K_CORE)?,
            output_dir: PathBuf::from(required(map, "output.dir")?),
            seeds,
            model,
            train,
            eval_split: Split::parse(required_or(map, "eval.split", "test"))?,
            eval: EvalOptions {
                filter_seen: value(map, "eval.filter_seen", false)?,
            },
        })
    }

    /// Every key with its effective value (defaults materialized).
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = crate::evaluation::config_echo(&self.model, &self.train, self.eval_split, &self.eval);
        m.remove("eval.unit");
        m.insert("dataset.path".into(), self.dataset_path.display().to_string());
        m.insert("dataset.format".into(), self.dataset_format.as_str().into());
        m.insert("dataset.k_core".into(), self.k_core.to_string());
        m.insert("output.dir".into(), self.output_dir.display().to_string());
        m.insert(
            "run.seeds".into(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        debug_assert!(KEYS.iter().all(|k| m.contains_key(*k)));
        m
    }

    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Checkpoint metadata: the resolved configuration, the seed actually
    /// trained, and the dataset dimensions the parameters were sized for.
    pub fn to_meta(&self, seed: u64, dataset: &Dataset) -> BTreeMap<String, String> {
        let mut m = self.resolved();
        m.insert(META_SEED.into(), seed.to_string());
        m.insert(META_USERS.into(), dataset.n_users.to_string());
        m.insert(META_ITEMS.into(), dataset.n_items.to_string());
        m
    }

    /// Inverse of [`RunConfig::to_meta`]: the configuration and trained seed.
    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<(Self, u64)> {
        let seed = meta
            .get(META_SEED)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{META_SEED}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad `{META_SEED}`")))?;
        let config: BTreeMap<String, String> = meta
            .iter()
            .filter(|(k, _)| !k.starts_with("meta."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok((Self::from_map(&config)?, seed))
    }

    /// Training configuration for one seed of the seed list.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        if !self.dataset_path.exists() {
            return Err(Error::Config(format!(
                "dataset.path `{}` does not exist",
                self.dataset_path.display()
            )));
        }
        match self.dataset_format {
            DatasetFormat::Canonical => Dataset::load(&self.dataset_path),
            DatasetFormat::Raw(f) => {
                let file = std::fs::File::open(&self.dataset_path)?;
                crate::data::preprocess(std::io::BufReader::new(file), f, self.k_core)
            }
        }
    }
}

fn required_or<'a>(map: &'a BTreeMap<String, String>, key: &str, default: &'a str) -> &'a str {
    map.get(key).map_or(default, String::as_str)
}
