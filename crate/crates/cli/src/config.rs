//! Run settings merged from an optional config file and the command line.
//!
//! The config file holds `key = value` lines. Keys before the first
//! `[section]` header apply to every subcommand; keys under `[name]` apply
//! to subcommand `name` only and override the global ones. Flags override
//! both. Keys are case-insensitive and `-` and `_` are interchangeable.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Parses config text, keeping the global entries and those of `command`.
pub fn parse_config(text: &str, command: &str) -> CliResult<BTreeMap<String, String>> {
    let mut global = BTreeMap::new();
    let mut local = BTreeMap::new();
    let mut section: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(normalize_key(name));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", k + 1)))?;
        let key = normalize_key(key);
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", k + 1)));
        }
        let value = value.trim().trim_matches('"').to_string();
        match &section {
            None => {
                global.insert(key, value);
            }
            Some(s) if s == command => {
                local.insert(key, value);
            }
            Some(_) => {}
        }
    }
    global.extend(local);
    Ok(global)
}

impl Settings {
    /// Merges the config file (if any) with flag values given as
    /// `(key, value)` pairs.
    pub fn load(command: &str, config: Option<&Path>, flags: Vec<(String, String)>) -> CliResult<Self> {
        let mut values = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                parse_config(&text, command)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in flags {
            values.insert(normalize_key(&k), v);
        }
        Ok(Self { values })
    }

    #[cfg(test)]
    pub fn from_pairs<K: AsRef<str>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            values: pairs.into_iter().map(|(k, v)| (normalize_key(k.as_ref()), v.into())).collect(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("invalid value '{v}' for {key}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::usage(format!("missing required setting '{key}'")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|e| CliError::usage(format!("invalid entry '{s}' for {key}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> CliResult<bool> {
        match self.raw(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(false),
            Some(v) => match v.as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(CliError::usage(format!("invalid boolean '{v}' for {key}"))),
            },
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }
}
