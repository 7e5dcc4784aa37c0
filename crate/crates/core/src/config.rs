//! Flat `name = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Everything after the
//! first `=` is the value, trimmed. Duplicate keys are an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Config { line, msg: format!("expected `name = value`, got `{trimmed}`") });
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config { line, msg: format!("invalid key `{key}`") });
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.trim().to_string())) {
                return Err(Error::Config { line, msg: format!("duplicate key `{key}` (first set on line {first})") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Returns the line number and raw value of `key`.
    pub fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some((line, raw)) => raw.parse::<T>().map_err(|_| Error::Config {
                line,
                msg: format!("cannot parse value `{raw}` for `{key}`"),
            }),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed_or(key, default)?;
        if !v.is_finite() {
            let line = self.get(key).map(|(l, _)| l).unwrap_or(0);
            return Err(Error::Config { line, msg: format!("`{key}` must be finite") });
        }
        Ok(v)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parsed_or(key, default)
    }

    /// Comma-separated list of exactly `N` finite floats.
    pub fn array_or<const N: usize>(&self, key: &str, default: [f64; N]) -> Result<[f64; N]> {
        let Some((line, raw)) = self.get(key) else {
            return Ok(default);
        };
        let err = |msg: String| Error::Config { line, msg };
        let values = raw
            .split(',')
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err(format!("`{key}` must be a comma-separated list of finite numbers")))?;
        values
            .try_into()
            .map_err(|v: Vec<f64>| err(format!("`{key}` needs {N} values, got {}", v.len())))
    }

    /// Errors on the first key not contained in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config { line: *line, msg: format!("unknown key `{key}`") });
            }
        }
        Ok(())
    }
}
