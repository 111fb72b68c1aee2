//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then a config
//! file, then `--key=value` overrides. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::losses::{ContrastiveConfig, LossKind, NegativeMode};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::ramha::{Normalization, RamhaConfig};
use crate::scorers::{ScorerConfig, ScorerKind};
use crate::trainer::{TemperatureStrategy, TrainConfig};

/// Every recognised key, in snapshot order.
pub const KEYS: &[&str] = &[
    "dataset.dir",
    "dataset.inverses",
    "dataset.dedup",
    "run.seed",
    "run.out_dir",
    "run.workers",
    "run.checked",
    "encoder.layers",
    "encoder.heads",
    "encoder.dim",
    "encoder.dropout",
    "encoder.norm",
    "encoder.basis_threshold",
    "encoder.num_bases",
    "scorer.kind",
    "scorer.transe_norm",
    "scorer.conve.rows",
    "scorer.conve.cols",
    "scorer.conve.filters",
    "scorer.conve.filter_h",
    "scorer.conve.filter_w",
    "scorer.conve.hidden_dropout",
    "loss.kind",
    "loss.k_plus",
    "loss.negatives",
    "loss.q",
    "loss.margin",
    "loss.normalize",
    "loss.tau.strategy",
    "loss.tau.init",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_min_ratio",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.eval_every",
    "train.patience",
    "train.early_stop",
    "eval.tie_policy",
    "eval.batch_size",
];

/// Keys that determine parameter shapes and graph structure.
const FINGERPRINT_PREFIXES: &[&str] = &["encoder.", "scorer.", "dataset.inverses", "dataset.dedup"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub inverses: bool,
    pub dedup: bool,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            inverses: true,
            dedup: false,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "dataset.dir" => self.dataset_dir = PathBuf::from(value),
            "dataset.inverses" => self.inverses = parse_bool(key, value)?,
            "dataset.dedup" => self.dedup = parse_bool(key, value)?,
            "run.seed" => t.seed = parse(key, value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "run.workers" => t.eval.workers = parse(key, value)?,
            "run.checked" => t.checked = parse_bool(key, value)?,
            "encoder.layers" => m.encoder.layers = parse(key, value)?,
            "encoder.heads" => m.encoder.heads = parse(key, value)?,
            "encoder.dim" => {
                m.encoder.dim = parse(key, value)?;
                m.scorer.dim = m.encoder.dim;
            }
            "encoder.dropout" => m.encoder.dropout = parse(key, value)?,
            "encoder.norm" => m.encoder.norm = parse::<Normalization>(key, value)?,
            "encoder.basis_threshold" => m.encoder.basis_threshold = parse(key, value)?,
            "encoder.num_bases" => m.encoder.num_bases = parse(key, value)?,
            "scorer.kind" => m.scorer.kind = parse::<ScorerKind>(key, value)?,
            "scorer.transe_norm" => m.scorer.transe_norm = parse(key, value)?,
            "scorer.conve.rows" => m.scorer.reshape_rows = parse(key, value)?,
            "scorer.conve.cols" => m.scorer.reshape_cols = parse(key, value)?,
            "scorer.conve.filters" => m.scorer.n_filters = parse(key, value)?,
            "scorer.conve.filter_h" => m.scorer.filter_h = parse(key, value)?,
            "scorer.conve.filter_w" => m.scorer.filter_w = parse(key, value)?,
            "scorer.conve.hidden_dropout" => m.scorer.hidden_dropout = parse(key, value)?,
            "loss.kind" => t.loss = parse::<LossKind>(key, value)?,
            "loss.k_plus" => t.contrastive.k_plus = parse(key, value)?,
            "loss.negatives" => t.contrastive.negatives = parse::<NegativeMode>(key, value)?,
            "loss.q" => t.contrastive.q = parse(key, value)?,
            "loss.margin" => t.margin = parse(key, value)?,
            "loss.normalize" => t.normalize_scores = parse_bool(key, value)?,
            "loss.tau.strategy" => t.temperature = parse::<TemperatureStrategy>(key, value)?,
            "loss.tau.init" => t.contrastive.tau = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_min_ratio" => t.lr_min_ratio = parse(key, value)?,
            "train.weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "train.beta1" => t.adamw.beta1 = parse(key, value)?,
            "train.beta2" => t.adamw.beta2 = parse(key, value)?,
            "train.eps" => t.adamw.eps = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.early_stop" => t.early_stop = parse_bool(key, value)?,
            "eval.tie_policy" => t.eval.policy = parse(key, value)?,
            "eval.batch_size" => t.eval.batch_size = parse(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in canonical text form.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        Ok(match key {
            "dataset.dir" => self.dataset_dir.display().to_string(),
            "dataset.inverses" => self.inverses.to_string(),
            "dataset.dedup" => self.dedup.to_string(),
            "run.seed" => t.seed.to_string(),
            "run.out_dir" => self.out_dir.display().to_string(),
            "run.workers" => t.eval.workers.to_string(),
            "run.checked" => t.checked.to_string(),
            "encoder.layers" => m.encoder.layers.to_string(),
            "encoder.heads" => m.encoder.heads.to_string(),
            "encoder.dim" => m.encoder.dim.to_string(),
            "encoder.dropout" => m.encoder.dropout.to_string(),
            "encoder.norm" => m.encoder.norm.to_string(),
            "encoder.basis_threshold" => m.encoder.basis_threshold.to_string(),
            "encoder.num_bases" => m.encoder.num_bases.to_string(),
            "scorer.kind" => m.scorer.kind.to_string(),
            "scorer.transe_norm" => m.scorer.transe_norm.to_string(),
            "scorer.conve.rows" => m.scorer.reshape_rows.to_string(),
            "scorer.conve.cols" => m.scorer.reshape_cols.to_string(),
            "scorer.conve.filters" => m.scorer.n_filters.to_string(),
            "scorer.conve.filter_h" => m.scorer.filter_h.to_string(),
            "scorer.conve.filter_w" => m.scorer.filter_w.to_string(),
            "scorer.conve.hidden_dropout" => m.scorer.hidden_dropout.to_string(),
            "loss.kind" => t.loss.to_string(),
            "loss.k_plus" => t.contrastive.k_plus.to_string(),
            "loss.negatives" => t.contrastive.negatives.to_string(),
            "loss.q" => t.contrastive.q.to_string(),
            "loss.margin" => t.margin.to_string(),
            "loss.normalize" => t.normalize_scores.to_string(),
            "loss.tau.strategy" => t.temperature.to_string(),
            "loss.tau.init" => t.contrastive.tau.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_min_ratio" => t.lr_min_ratio.to_string(),
            "train.weight_decay" => t.adamw.weight_decay.to_string(),
            "train.beta1" => t.adamw.beta1.to_string(),
            "train.beta2" => t.adamw.beta2.to_string(),
            "train.eps" => t.adamw.eps.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.early_stop" => t.early_stop.to_string(),
            "eval.tie_policy" => t.eval.policy.to_string(),
            "eval.batch_size" => t.eval.batch_size.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Applies every assignment in config-file syntax.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: "expected `key = value`".into(),
                });
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `--key=value` (or `key=value`) overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let body = a.strip_prefix("--").unwrap_or(a);
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not of the form --key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides`.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text, p)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    /// Hash of the keys that fix parameter shapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| FINGERPRINT_PREFIXES.iter().any(|p| k.starts_with(p))) {
            h.update(format!("{k}={}\n", self.get(k).expect("listed key")).as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn eval_options(&self) -> EvalOptions {
        self.train.eval
    }

    pub fn contrastive(&self) -> &ContrastiveConfig {
        &self.train.contrastive
    }

    pub fn adamw(&self) -> &AdamWConfig {
        &self.train.adamw
    }

    pub fn encoder(&self) -> &RamhaConfig {
        &self.model.encoder
    }

    pub fn scorer(&self) -> &ScorerConfig {
        &self.model.scorer
    }
}
