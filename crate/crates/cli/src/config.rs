//! Flat key=value configuration with file loading, command-line overrides,
//! and a record of every resolved value (including defaults) for the run
//! manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use functa_core::{FunctaError, Result};

#[derive(Default)]
pub struct Config {
    entries: Vec<(String, String)>,
    resolved: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    FunctaError::Config(format!(
                        "{}:{}: expected key=value, got '{line}'",
                        p.display(),
                        lineno + 1
                    ))
                })?;
                cfg.set(k.trim(), v.trim());
            }
        }
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                FunctaError::Config(format!("override '{ov}' is not key=value"))
            })?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) {
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Typed lookup with a default; the effective value is recorded.
    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => {
                let parsed = v.parse::<T>().map_err(|_| {
                    FunctaError::Config(format!("key '{key}': cannot parse '{v}'"))
                })?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(parsed)
            }
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Typed lookup of a mandatory key.
    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| FunctaError::Config(format!("missing required key '{key}'")))?
            .to_string();
        let parsed = v
            .parse::<T>()
            .map_err(|_| FunctaError::Config(format!("key '{key}': cannot parse '{v}'")))?;
        self.resolved.insert(key.to_string(), v);
        Ok(parsed)
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    /// Optional key with no default.
    pub fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            Some(v) => {
                let parsed = v.parse::<T>().map_err(|_| {
                    FunctaError::Config(format!("key '{key}': cannot parse '{v}'"))
                })?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(parsed))
            }
            None => Ok(None),
        }
    }

    pub fn optional_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.optional::<String>(key)?.map(PathBuf::from))
    }

    /// Every key touched during resolution, with its effective value.
    pub fn resolved(&self) -> impl Iterator<Item = (&String, &String)> {
        self.resolved.iter()
    }

    /// Keys present in the file/overrides but never consumed — typically a
    /// typo worth rejecting.
    pub fn unused_keys(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| !self.resolved.contains_key(k))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn reject_unused(&self) -> Result<()> {
        let unused = self.unused_keys();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(FunctaError::Config(format!(
                "unknown configuration keys: {}",
                unused.join(", ")
            )))
        }
    }
}
