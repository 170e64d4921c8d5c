//! Minimal `key = value` text format shared by the generator and training configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique.

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
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|_| Error::Parse {
                line: *line,
                message: format!("cannot parse value {value:?} for key {key:?}"),
            }),
        }
    }

    /// Rejects any key for which `known` returns false.
    pub fn reject_unknown(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known(key) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("unknown key {key:?}"),
                });
            }
        }
        Ok(())
    }
}
