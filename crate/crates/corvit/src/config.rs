//! Flat `key = value` configuration files.
//!
//! Every CLI flag has a matching file key. Precedence is flags over file
//! over built-in defaults; the resolved values are echoed into the run
//! manifest so a run is reconstructible from its artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed contents of one config file (or an empty stand-in when no file
/// was given). Keys are kept sorted for deterministic iteration.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parse a file of `key = value` lines. Blank lines and `#` comments are
    /// skipped; duplicate keys and lines without `=` are errors that name
    /// the line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(
                    "config",
                    format!("line {}: expected `key = value`, got `{raw}`", i + 1),
                )
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::invalid("config", format!("line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(Error::invalid(
                    "config",
                    format!("line {}: duplicate key `{key}`", i + 1),
                ));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// Typed lookup; a present-but-unparsable value is an error naming the
    /// key.
    pub fn lookup<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::invalid("config", format!("key `{key}`: cannot parse `{raw}`: {e}"))
            }),
        }
    }

    /// Reject keys outside the given allowlist so typos fail loudly.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::invalid(
                    "config",
                    format!("unknown key `{key}` (allowed: {})", allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Flag > file > default resolution for one setting.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
