//! Flat key=value run configuration.
//!
//! The format is a plain text file of dotted keys, one per line:
//!
//! ```text
//! # comments and blank lines are skipped
//! data.source = synthetic
//! train.epochs = 6
//! adapt.strategy = maximize
//! ```
//!
//! Unknown keys are errors (with the line number), duplicate keys keep
//! the last value and produce a warning, and command-line overrides are
//! applied on top of the file. Every key has a default, so an empty
//! configuration trains a small synthetic run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapt::{AdaptConfig, Strategy};
use crate::augment::OpKind;
use crate::data::{DataSource, DatasetSpec};
use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::nn::{Arch, OptimConfig, Schedule};

/// Every key the format accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "data.source",
    "data.classes",
    "data.height",
    "data.width",
    "data.train_count",
    "data.test_count",
    "data.seed",
    "data.jitter",
    "data.dir",
    "data.cifar_train",
    "data.cifar_test",
    "model.arch",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.schedule",
    "adapt.delta",
    "adapt.epsilon",
    "adapt.strategy",
    "adapt.include_original",
    "train.n_ops",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.eval_every",
    "report.timing",
    "augment.ops",
];

/// Key/value pairs as written, before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pairs: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    pub fn pairs(&self) -> &BTreeMap<String, String> {
        &self.pairs
    }

    fn check_key(key: &str, place: &str) -> Result<()> {
        if KNOWN_KEYS.contains(&key) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key '{key}' {place}")))
        }
    }

    /// Apply one `key=value` override (a `--set` argument).
    pub fn apply_set(&mut self, setting: &str) -> Result<()> {
        let (key, value) = setting.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{setting}' is not of the form key=value"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        Self::check_key(key, "in a command-line override")?;
        self.pairs.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Merge another config over this one (later sources win).
    pub fn merge_from(&mut self, other: &RawConfig) {
        for (k, v) in &other.pairs {
            self.pairs.insert(k.clone(), v.clone());
        }
    }

    /// Sorted `key=value` lines; the basis for the config hash.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parse configuration text. Returns warnings (currently only duplicate
/// keys) alongside the parsed pairs; `origin` names the source in errors.
pub fn parse_text(text: &str, origin: &str) -> Result<(RawConfig, Vec<String>)> {
    let mut cfg = RawConfig::default();
    let mut warnings = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{line_no}: expected key = value, got '{line}'"
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("{origin}:{line_no}: empty key")));
        }
        RawConfig::check_key(key, &format!("at {origin}:{line_no}"))?;
        if cfg
            .pairs
            .insert(key.to_string(), value.to_string())
            .is_some()
        {
            warnings.push(format!(
                "{origin}:{line_no}: duplicate key '{key}', the later value wins"
            ));
        }
    }
    Ok((cfg, warnings))
}

/// Parse a configuration file.
pub fn load_file(path: &Path) -> Result<(RawConfig, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text(&text, &path.display().to_string())
}

/// Fully typed and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub data: DatasetSpec,
    pub arch: Arch,
    pub optim: OptimConfig,
    pub adapt: AdaptConfig,
    /// Ops sampled into each batch's pipeline.
    pub n_ops: usize,
    pub epochs: u32,
    pub batch_size: usize,
    /// Master seed; every random decision derives from a named substream.
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0 = final only).
    pub eval_every: u32,
    /// Print real wall-clock seconds in the CSV (breaks byte determinism).
    pub timing: bool,
    /// Restrict the op registry; `None` means every op.
    pub ops: Option<Vec<OpKind>>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            data: DatasetSpec::default(),
            arch: Arch::MlpS,
            optim: OptimConfig::default(),
            adapt: AdaptConfig::default(),
            n_ops: 2,
            epochs: 4,
            batch_size: 64,
            seed: 42,
            eval_every: 1,
            timing: false,
            ops: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: could not parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

impl TrainerConfig {
    /// Type and validate raw pairs on top of the defaults.
    pub fn from_raw(raw: &RawConfig) -> Result<TrainerConfig> {
        let mut cfg = TrainerConfig::default();
        for (key, value) in raw.pairs() {
            match key.as_str() {
                "data.source" => {
                    cfg.data.source = match value.as_str() {
                        "synthetic" => DataSource::Synthetic,
                        "idx" => DataSource::Idx,
                        "cifar" => DataSource::CifarBinary,
                        other => {
                            return Err(Error::Config(format!(
                                "data.source: expected synthetic, idx, or cifar, got '{other}'"
                            )))
                        }
                    }
                }
                "data.classes" => cfg.data.classes = parse_value(key, value)?,
                "data.height" => cfg.data.height = parse_value(key, value)?,
                "data.width" => cfg.data.width = parse_value(key, value)?,
                "data.train_count" => cfg.data.train_count = parse_value(key, value)?,
                "data.test_count" => cfg.data.test_count = parse_value(key, value)?,
                "data.seed" => cfg.data.seed = parse_value(key, value)?,
                "data.jitter" => cfg.data.jitter = parse_value(key, value)?,
                "data.dir" => cfg.data.dir = Some(PathBuf::from(value)),
                "data.cifar_train" => {
                    cfg.data.cifar_train = value.split(',').map(PathBuf::from).collect()
                }
                "data.cifar_test" => {
                    cfg.data.cifar_test = value.split(',').map(PathBuf::from).collect()
                }
                "model.arch" => cfg.arch = Arch::from_str(value)?,
                "optim.lr" => cfg.optim.lr = parse_value(key, value)?,
                "optim.momentum" => cfg.optim.momentum = parse_value(key, value)?,
                "optim.weight_decay" => cfg.optim.weight_decay = parse_value(key, value)?,
                "optim.schedule" => cfg.optim.schedule = Schedule::from_str(value)?,
                "adapt.delta" => cfg.adapt.delta = parse_value(key, value)?,
                "adapt.epsilon" => cfg.adapt.epsilon = parse_value(key, value)?,
                "adapt.strategy" => cfg.adapt.strategy = Strategy::from_str(value)?,
                "adapt.include_original" => cfg.adapt.include_original = parse_bool(key, value)?,
                "train.n_ops" => cfg.n_ops = parse_value(key, value)?,
                "train.epochs" => cfg.epochs = parse_value(key, value)?,
                "train.batch_size" => cfg.batch_size = parse_value(key, value)?,
                "train.seed" => cfg.seed = parse_value(key, value)?,
                "train.eval_every" => cfg.eval_every = parse_value(key, value)?,
                "report.timing" => cfg.timing = parse_bool(key, value)?,
                "augment.ops" => {
                    let kinds: Result<Vec<OpKind>> = value
                        .split(',')
                        .map(|name| {
                            OpKind::from_name(name.trim()).ok_or_else(|| {
                                Error::Config(format!("augment.ops: unknown op '{}'", name.trim()))
                            })
                        })
                        .collect();
                    cfg.ops = Some(kinds?);
                }
                // parse_text/apply_set already rejected unknown keys.
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.adapt.validate()?;
        if self.data.classes < 2 {
            return Err(Error::Config(format!(
                "data.classes must be at least 2, got {}",
                self.data.classes
            )));
        }
        if self.data.height == 0 || self.data.width == 0 {
            return Err(Error::Config("image dimensions must be non-zero".into()));
        }
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::Config("both dataset splits must be non-empty".into()));
        }
        if !(self.data.jitter.is_finite() && self.data.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "data.jitter must be non-negative, got {}",
                self.data.jitter
            )));
        }
        if self.adapt.strategy != Strategy::Disabled && self.adapt.epsilon == 0 {
            return Err(Error::Config(
                "adapt.epsilon must be at least 1 when adaptation is on; \
                 set adapt.strategy=none for the no-adaptation baseline"
                    .into(),
            ));
        }
        if self.n_ops == 0 {
            return Err(Error::Config("train.n_ops must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let Some(ops) = &self.ops {
            if ops.is_empty() {
                return Err(Error::Config("augment.ops must not be empty".into()));
            }
        }
        Ok(())
    }

    /// The complete effective configuration as flat pairs, defaults
    /// included. This is what reports echo and hash.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let src = match self.data.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Idx => "idx",
            DataSource::CifarBinary => "cifar",
        };
        m.insert("data.source".into(), src.into());
        m.insert("data.classes".into(), self.data.classes.to_string());
        m.insert("data.height".into(), self.data.height.to_string());
        m.insert("data.width".into(), self.data.width.to_string());
        m.insert("data.train_count".into(), self.data.train_count.to_string());
        m.insert("data.test_count".into(), self.data.test_count.to_string());
        m.insert("data.seed".into(), self.data.seed.to_string());
        m.insert("data.jitter".into(), self.data.jitter.to_string());
        if let Some(dir) = &self.data.dir {
            m.insert("data.dir".into(), dir.display().to_string());
        }
        if !self.data.cifar_train.is_empty() {
            let joined: Vec<String> = self
                .data
                .cifar_train
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            m.insert("data.cifar_train".into(), joined.join(","));
        }
        if !self.data.cifar_test.is_empty() {
            let joined: Vec<String> = self
                .data
                .cifar_test
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            m.insert("data.cifar_test".into(), joined.join(","));
        }
        m.insert("model.arch".into(), self.arch.name().into());
        m.insert("optim.lr".into(), self.optim.lr.to_string());
        m.insert("optim.momentum".into(), self.optim.momentum.to_string());
        m.insert(
            "optim.weight_decay".into(),
            self.optim.weight_decay.to_string(),
        );
        let sched = match self.optim.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        };
        m.insert("optim.schedule".into(), sched.into());
        m.insert("adapt.delta".into(), self.adapt.delta.to_string());
        m.insert("adapt.epsilon".into(), self.adapt.epsilon.to_string());
        m.insert("adapt.strategy".into(), self.adapt.strategy.name().into());
        m.insert(
            "adapt.include_original".into(),
            self.adapt.include_original.to_string(),
        );
        m.insert("train.n_ops".into(), self.n_ops.to_string());
        m.insert("train.epochs".into(), self.epochs.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.seed".into(), self.seed.to_string());
        m.insert("train.eval_every".into(), self.eval_every.to_string());
        m.insert("report.timing".into(), self.timing.to_string());
        if let Some(ops) = &self.ops {
            let names: Vec<&str> = ops.iter().map(|k| k.name()).collect();
            m.insert("augment.ops".into(), names.join(","));
        }
        m
    }

    /// Hash of the effective configuration.
    pub fn config_hash(&self) -> u64 {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        fnv1a64(text.as_bytes())
    }
}
