//! Flat `section.key = value` configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Every key a config may set. Anything else is rejected.
pub const KNOWN_KEYS: &[&str] = &[
    "run.seed",
    "run.samples",
    "run.out",
    "run.record",
    "model.kind",
    "model.dim",
    "model.weights",
    "model.means",
    "model.covariances",
    "model.path",
    "model.clamp",
    "schedule.steps",
    "schedule.eta",
    "schedule.beta_start",
    "schedule.beta_end",
    "steering.k",
    "steering.k_schedule",
    "steering.iterations",
    "steering.mode",
    "task.kind",
    "task.mask_file",
    "task.mask_style",
    "task.observed_fraction",
    "task.scale",
    "task.indices",
    "task.values",
    "task.condition_file",
    "task.target",
    "task.side",
    "oracle.calibrate",
    "sweep.k_values",
    "sweep.forms",
    "sweep.match_residual",
    "train.steps",
    "train.learning_rate",
    "train.batch_size",
    "train.hidden",
    "train.activation",
    "train.dataset_size",
    "train.channels",
    "train.side",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// Directory that relative paths in this entry are resolved against.
    base: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        Self::parse_with_base(text, None)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf);
        Self::parse_with_base(&text, base)
    }

    fn parse_with_base(text: &str, base: Option<PathBuf>) -> CliResult<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected `section.key = value`", no + 1)))?;
            let key = key.trim();
            if cfg.entries.contains_key(key) {
                return Err(invalid(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            cfg.insert(key, value.trim(), base.clone())?;
        }
        Ok(cfg)
    }

    fn insert(&mut self, key: &str, value: &str, base: Option<PathBuf>) -> CliResult<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(invalid(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), base });
        Ok(())
    }

    /// Overrides (or adds) a key; relative paths resolve against the working directory.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        self.insert(key, value, None)
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| invalid(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| invalid(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn f64_in(&self, key: &str, default: f64, lo: f64, hi: f64) -> CliResult<f64> {
        let v: f64 = self.get_or(key, default)?;
        if !(lo..=hi).contains(&v) {
            return Err(invalid(format!("`{key}` = {v} is outside [{lo}, {hi}]")));
        }
        Ok(v)
    }

    pub fn usize_in(&self, key: &str, default: usize, lo: usize, hi: usize) -> CliResult<usize> {
        let v: usize = self.get_or(key, default)?;
        if !(lo..=hi).contains(&v) {
            return Err(invalid(format!("`{key}` = {v} is outside [{lo}, {hi}]")));
        }
        Ok(v)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> CliResult<bool> {
        self.get_or(key, default)
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| invalid(format!("`{key}`: cannot parse `{s}`"))))
            .collect::<CliResult<Vec<T>>>()
            .map(Some)
    }

    /// A path that must exist.
    pub fn existing_path(&self, key: &str) -> CliResult<Option<PathBuf>> {
        let Some(e) = self.entries.get(key) else { return Ok(None) };
        let p = PathBuf::from(&e.value);
        let p = match &e.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        };
        if !p.is_file() {
            return Err(invalid(format!("`{key}`: file {} does not exist", p.display())));
        }
        Ok(Some(p))
    }

    /// Sorted `key = value` lines; the hashed form of the config. The output
    /// directory is left out, so the same experiment hashes the same wherever
    /// it is written.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .filter(|(k, _)| k.as_str() != "run.out")
            .map(|(k, e)| format!("{k} = {}\n", e.value))
            .collect()
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
