//! Run configuration: defaults, config-file values, then CLI-flag overrides,
//! in that order. The resolved config is written back as a snapshot so any
//! run can be reproduced from its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use same_core::adam::AdamConfig;
use same_core::model::{ModelConfig, TaskSet, TaskWeights};
use same_core::training::{EarlyStopConfig, MetaGradMode, StrategyKind, TrainConfig};
use same_core::tudataset::{self, FeatureMode};
use same_core::graph::GraphDataset;
use same_core::{Error, Result};

pub const DATA_ROOT_ENV: &str = "SAME_DATA_ROOT";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: String,
    pub data_root: Option<PathBuf>,
    pub strategy: StrategyKind,
    pub tasks: TaskSet,
    pub folds: usize,
    pub fold_filter: Vec<usize>,
    pub seed: u64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub meta_grad: MetaGradMode,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub normalize_between: bool,
    pub normalize_final: bool,
    pub feature_mode: FeatureMode,
    pub stratify_folds: bool,
    pub weights: TaskWeights,
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: String::new(),
            data_root: None,
            strategy: StrategyKind::ESame,
            tasks: TaskSet::all(),
            folds: 10,
            fold_filter: Vec::new(),
            seed: 0,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            inner_steps: 1,
            epochs: None,
            batch_size: 30,
            meta_grad: MetaGradMode::FirstOrder,
            hidden_dim: 256,
            num_layers: 3,
            normalize_between: true,
            normalize_final: true,
            feature_mode: FeatureMode::AttributesElseLabels,
            stratify_folds: true,
            weights: TaskWeights::default(),
            patience: 50,
            eval_every: 5,
        }
    }
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Argument(format!("{key}: cannot parse bool {other:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Argument(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Applies `key = value` pairs from a config file.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            match key.as_str() {
                "dataset" => self.dataset = value.clone(),
                "data_root" => self.data_root = Some(PathBuf::from(value)),
                "strategy" => self.strategy = StrategyKind::parse(value)?,
                "tasks" => self.tasks = TaskSet::parse(value)?,
                "folds" => self.folds = parse_num(value, key)?,
                "fold_filter" => {
                    self.fold_filter = value
                        .split(',')
                        .filter(|p| !p.trim().is_empty())
                        .map(|p| parse_num(p, key))
                        .collect::<Result<_>>()?
                }
                "seed" => self.seed = parse_num(value, key)?,
                "inner_lr" => self.inner_lr = parse_num(value, key)?,
                "outer_lr" => self.outer_lr = parse_num(value, key)?,
                "inner_steps" => self.inner_steps = parse_num(value, key)?,
                "epochs" => self.epochs = Some(parse_num(value, key)?),
                "batch_size" => self.batch_size = parse_num(value, key)?,
                "meta_grad" => self.meta_grad = MetaGradMode::parse(value)?,
                "hidden_dim" => self.hidden_dim = parse_num(value, key)?,
                "num_layers" => self.num_layers = parse_num(value, key)?,
                "normalize_between" => self.normalize_between = parse_bool(value, key)?,
                "normalize_final" => self.normalize_final = parse_bool(value, key)?,
                "feature_mode" => {
                    self.feature_mode = match value.trim() {
                        "attributes" => FeatureMode::AttributesElseLabels,
                        "concat" => FeatureMode::ConcatAttributesAndLabels,
                        other => {
                            return Err(Error::Argument(format!(
                                "feature_mode: expected attributes|concat, got {other:?}"
                            )))
                        }
                    }
                }
                "stratify_folds" => self.stratify_folds = parse_bool(value, key)?,
                "lambda_gc" => self.weights.gc = parse_num(value, key)?,
                "lambda_nc" => self.weights.nc = parse_num(value, key)?,
                "lambda_lp" => self.weights.lp = parse_num(value, key)?,
                "patience" => self.patience = parse_num(value, key)?,
                "eval_every" => self.eval_every = parse_num(value, key)?,
                other => {
                    return Err(Error::Argument(format!("unknown config key {other:?}")))
                }
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; also the config-hash input and the
    /// snapshot format (parseable by [`parse_config_file`]).
    pub fn canonical(&self) -> String {
        let mut out = String::from("[run]\n");
        let feature_mode = match self.feature_mode {
            FeatureMode::AttributesElseLabels => "attributes",
            FeatureMode::ConcatAttributesAndLabels => "concat",
        };
        let fold_filter = self
            .fold_filter
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let epochs = self
            .epochs
            .unwrap_or_else(|| same_core::training::default_epochs(self.strategy, self.tasks));
        let pairs: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("dataset", self.dataset.clone()),
            ("epochs", epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("feature_mode", feature_mode.to_string()),
            ("fold_filter", fold_filter),
            ("folds", self.folds.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("inner_lr", format!("{:?}", self.inner_lr)),
            ("inner_steps", self.inner_steps.to_string()),
            ("lambda_gc", format!("{:?}", self.weights.gc)),
            ("lambda_lp", format!("{:?}", self.weights.lp)),
            ("lambda_nc", format!("{:?}", self.weights.nc)),
            ("meta_grad", self.meta_grad.name().to_string()),
            ("normalize_between", self.normalize_between.to_string()),
            ("normalize_final", self.normalize_final.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("outer_lr", format!("{:?}", self.outer_lr)),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("strategy", self.strategy.name().to_string()),
            ("stratify_folds", self.stratify_folds.to_string()),
            ("tasks", self.tasks.label()),
        ];
        for (key, value) in pairs {
            if !value.is_empty() {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    pub fn config_hash(&self) -> u64 {
        same_core::report::config_hash(&self.canonical())
    }

    /// Resolves the dataset directory: an existing path wins, otherwise the
    /// name is looked up under `--data-root` / `$SAME_DATA_ROOT`.
    pub fn dataset_dir(&self) -> Result<(PathBuf, String)> {
        let as_path = PathBuf::from(&self.dataset);
        if as_path.is_dir() {
            let name = as_path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Argument(format!("bad dataset path {as_path:?}")))?
                .to_string();
            return Ok((as_path, name));
        }
        let root = self
            .data_root
            .clone()
            .or_else(|| std::env::var(DATA_ROOT_ENV).ok().map(PathBuf::from))
            .ok_or_else(|| {
                Error::Format(format!(
                    "dataset {:?} is not a directory and no --data-root/{DATA_ROOT_ENV} is set",
                    self.dataset
                ))
            })?;
        let dir = root.join(&self.dataset);
        if !dir.is_dir() {
            return Err(Error::Format(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        Ok((dir, self.dataset.clone()))
    }

    pub fn load_dataset(&self) -> Result<GraphDataset> {
        let (dir, name) = self.dataset_dir()?;
        tudataset::parse_tudataset_with(&dir, &name, self.feature_mode)
    }

    pub fn model_config(&self, dataset: &GraphDataset) -> ModelConfig {
        let mut cfg = ModelConfig::for_dataset(dataset)
            .with_hidden_dim(self.hidden_dim)
            .with_num_layers(self.num_layers);
        cfg.normalize_between = self.normalize_between;
        cfg.normalize_final = self.normalize_final;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.strategy, self.tasks);
        cfg.inner_lr = self.inner_lr;
        cfg.adam = AdamConfig::with_lr(self.outer_lr);
        cfg.inner_steps = self.inner_steps;
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        cfg.batch_size = self.batch_size;
        cfg.weights = self.weights;
        cfg.meta_grad = self.meta_grad;
        cfg.early_stop = EarlyStopConfig {
            patience: self.patience,
            eval_every: self.eval_every,
        };
        cfg.seed = self.seed;
        cfg
    }

    /// Selected folds (all when no filter was given).
    pub fn selected_folds(&self) -> Result<Vec<usize>> {
        if self.fold_filter.is_empty() {
            return Ok((0..self.folds).collect());
        }
        if let Some(&bad) = self.fold_filter.iter().find(|&&f| f >= self.folds) {
            return Err(Error::Argument(format!(
                "fold {bad} out of range for {} folds",
                self.folds
            )));
        }
        Ok(self.fold_filter.clone())
    }
}

/// Parses a sectioned `key = value` config file. Section headers organise the
/// file but keys form a single flat namespace; `#` and `;` start comments.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: "expected key = value".into(),
        })?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_through_the_parser() {
        let cfg = RunConfig {
            dataset: "toy".into(),
            seed: 17,
            tasks: TaskSet::parse("gc,nc").unwrap(),
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.cfg");
        std::fs::write(&path, cfg.canonical()).unwrap();

        let mut reloaded = RunConfig::default();
        reloaded
            .apply_pairs(&parse_config_file(&path).unwrap())
            .unwrap();
        assert_eq!(reloaded.canonical(), cfg.canonical());
        assert_eq!(reloaded.config_hash(), cfg.config_hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let mut pairs = BTreeMap::new();
        pairs.insert("not_a_key".to_string(), "1".to_string());
        assert!(cfg.apply_pairs(&pairs).is_err());
    }
}
