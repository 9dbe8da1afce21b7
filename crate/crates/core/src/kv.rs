//! `key=value` text files with `#` comments, used for configs, manifests
//! and dataset sidecars.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; text after an unquoted ` #` is a trailing comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find(" #") {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_kv(&fs::read_to_string(path)?)
}

/// Ordered `key=value` pairs for output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvWriter {
    pairs: Vec<(String, String)>,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn render(&self) -> String {
        self.pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}
