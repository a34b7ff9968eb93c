//! Flat `key = value` run configuration.
//!
//! Keys are grouped by dotted prefixes: `phantom.*` (phantom spec),
//! `train.*` (training config and network specs), `data.*` and
//! `augment.*`, plus the top-level `seed`. Blank lines and lines starting
//! with `#` are ignored.

use std::fmt;
use std::path::PathBuf;

use mpgan::phantom::PhantomSpec;
use mpgan::settings::{self, SettingError, Settings};
use mpgan::train::{ClassifierTraining, TrainConfig};

pub const SEED_ENV: &str = "MPGAN_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigErrorKind {
    UnknownKey(String),
    TypeError(String),
    MissingRequired(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line of the offending entry, when it came from a file.
    pub line: Option<usize>,
    pub kind: ConfigErrorKind,
}

impl ConfigError {
    pub fn category(&self) -> &'static str {
        match self.kind {
            ConfigErrorKind::UnknownKey(_) => "UnknownKey",
            ConfigErrorKind::TypeError(_) => "TypeError",
            ConfigErrorKind::MissingRequired(_) => "MissingRequired",
        }
    }

    fn at(line: usize, kind: ConfigErrorKind) -> Self {
        ConfigError { line: Some(line), kind }
    }

    pub fn missing(key: &str) -> Self {
        ConfigError {
            line: None,
            kind: ConfigErrorKind::MissingRequired(key.to_string()),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        match &self.kind {
            ConfigErrorKind::UnknownKey(k) => write!(f, "unknown key {k:?}"),
            ConfigErrorKind::TypeError(m) => f.write_str(m),
            ConfigErrorKind::MissingRequired(k) => write!(f, "missing required key {k:?}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `seed` as written in the file; see [`resolve_seed`].
    pub seed: Option<u64>,
    pub phantom: PhantomSpec,
    /// Whether the file pinned `phantom.anatomy_seed`; otherwise the
    /// resolved global seed is used.
    pub anatomy_seed_set: bool,
    pub train: TrainConfig,
    /// Whether the file pinned `train.k`; otherwise K follows the data.
    pub k_set: bool,
    pub manifest: Option<PathBuf>,
    pub split: [f64; 3],
    pub augment: ClassifierTraining,
    pub augment_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomSpec::desk_default();
        RunConfig {
            seed: None,
            train: TrainConfig::desk(phantom.k),
            phantom,
            anatomy_seed_set: false,
            k_set: false,
            manifest: None,
            split: [0.8, 0.1, 0.1],
            augment: ClassifierTraining::default(),
            augment_per_class: 100,
        }
    }
}

fn type_error(e: SettingError) -> ConfigErrorKind {
    match e {
        SettingError::UnknownKey(k) => ConfigErrorKind::UnknownKey(k),
        SettingError::Type(m) => ConfigErrorKind::TypeError(m),
    }
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigErrorKind> {
        let unknown = || ConfigErrorKind::UnknownKey(key.to_string());
        let qualify = |e: SettingError| match e {
            SettingError::UnknownKey(_) => ConfigErrorKind::UnknownKey(key.to_string()),
            other => type_error(other),
        };
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real";
        if key == "seed" {
            self.seed = Some(settings::parse(key, value, INT).map_err(type_error)?);
        } else if let Some(k) = key.strip_prefix("phantom.") {
            self.phantom.set(k, value).map_err(qualify)?;
            self.anatomy_seed_set |= k == "anatomy_seed";
        } else if let Some(k) = key.strip_prefix("train.") {
            // the run seed is the top-level `seed`
            if k == "seed" {
                return Err(unknown());
            }
            self.train.set(k, value).map_err(qualify)?;
            self.k_set |= k == "k";
        } else if let Some(k) = key.strip_prefix("data.") {
            match k {
                "manifest" => self.manifest = Some(PathBuf::from(value.trim())),
                "split" => {
                    let v: Vec<f64> = settings::parse_list(key, value, "three comma-separated reals").map_err(type_error)?;
                    self.split = v
                        .try_into()
                        .map_err(|_| ConfigErrorKind::TypeError(format!("{key}: expected three comma-separated reals, found {value:?}")))?;
                }
                _ => return Err(unknown()),
            }
        } else if let Some(k) = key.strip_prefix("augment.") {
            match k {
                "per_class" => self.augment_per_class = settings::parse(key, value, INT).map_err(type_error)?,
                "steps" => self.augment.steps = settings::parse(key, value, INT).map_err(type_error)?,
                "batch_size" => self.augment.batch_size = settings::parse(key, value, INT).map_err(type_error)?,
                "lr" => self.augment.lr = settings::parse(key, value, REAL).map_err(type_error)?,
                _ => return Err(unknown()),
            }
        } else {
            return Err(unknown());
        }
        Ok(())
    }

    /// Resolved settings, one `key = value` line each, which
    /// [`parse_config`] reads back to an equal config.
    pub fn frozen(&self) -> String {
        let mut lines = Vec::new();
        if let Some(seed) = self.seed {
            lines.push(format!("seed = {seed}"));
        }
        for (k, v) in self.phantom.pairs() {
            // an unpinned anatomy seed follows the global seed on reload
            if k == "anatomy_seed" && !self.anatomy_seed_set {
                continue;
            }
            lines.push(format!("phantom.{k} = {v}"));
        }
        for (k, v) in self.train.pairs() {
            if k == "seed" || (k == "k" && !self.k_set) {
                continue;
            }
            lines.push(format!("train.{k} = {v}"));
        }
        if let Some(m) = &self.manifest {
            lines.push(format!("data.manifest = {}", m.display()));
        }
        lines.push(format!("data.split = {}", settings::join(&self.split)));
        lines.push(format!("augment.per_class = {}", self.augment_per_class));
        lines.push(format!("augment.steps = {}", self.augment.steps));
        lines.push(format!("augment.batch_size = {}", self.augment.batch_size));
        lines.push(format!("augment.lr = {:?}", self.augment.lr));
        lines.join("\n") + "\n"
    }

    /// Fixes the global seed: it becomes the training, split and
    /// augmentation seed, and the phantom anatomy seed unless pinned.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.augment.seed = seed;
        if !self.anatomy_seed_set {
            self.phantom.anatomy_seed = seed;
        }
    }
}

/// Parses config text. Unknown keys and unparsable values are reported
/// with their line number.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut config = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::at(i + 1, ConfigErrorKind::TypeError(format!("expected `key = value`, found {line:?}"))));
        };
        config.set(key.trim(), value.trim()).map_err(|kind| ConfigError::at(i + 1, kind))?;
    }
    Ok(config)
}

/// Seed precedence: command-line flag, then `MPGAN_SEED`, then the
/// config file, then [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env {
        return v.trim().parse().map_err(|_| ConfigError {
            line: None,
            kind: ConfigErrorKind::TypeError(format!("{SEED_ENV}: expected a non-negative integer, found {v:?}")),
        });
    }
    Ok(config.unwrap_or(DEFAULT_SEED))
}
