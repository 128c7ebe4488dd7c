//! Flat `key = value` documents with `#` comments, used for run
//! configuration files and the config block embedded in checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    Value { line: usize, key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Parsed document. Keys keep the line they were defined on for messages.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValueDoc {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValueDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, reason: format!("expected `key = value`, got `{content}`") });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(ConfigError::Syntax { line, reason: format!("invalid key `{k}`") });
            }
            if entries.insert(k.to_string(), (v.to_string(), line)).is_some() {
                return Err(ConfigError::Syntax { line, reason: format!("duplicate key `{k}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; absent keys yield `None`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else { return Ok(None) };
        v.parse::<T>().map(Some).map_err(|e| ConfigError::Value {
            line: *line,
            key: key.to_string(),
            value: v.clone(),
            reason: e.to_string(),
        })
    }

    /// Fails on the first key not listed in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for (k, (_, line)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey { line: *line, key: k.clone() });
            }
        }
        Ok(())
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KeyValueDoc) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}
