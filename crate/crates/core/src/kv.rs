//! Flat `key = value` text used for configs and checkpoint headers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Accumulates `key = value` lines in insertion order.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    lines: Vec<String>,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push(format!("{key} = {value}"));
        self
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.lines.push(format!("# {text}"));
        self
    }

    pub fn blank(&mut self) -> &mut Self {
        self.lines.push(String::new());
        self
    }

    pub fn finish(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

/// Parsed key/value text that tracks which keys were consumed.
#[derive(Debug, Clone)]
pub struct KvReader {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvReader {
    /// Blank lines and `#` comments are skipped; duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", no + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Ok(Self { map, used: BTreeSet::new() })
    }

    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => {
                self.used.insert(key.to_string());
                raw.parse::<V>()
                    .map(Some)
                    .map_err(|_| Error::Parse(format!("key `{key}`: cannot parse `{raw}`")))
            }
        }
    }

    /// Overwrites `target` when `key` is present.
    pub fn set<V: FromStr>(&mut self, key: &str, target: &mut V) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn require<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.take(key)?.ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            Err(Error::Parse(format!("unknown keys: {}", names.join(", "))))
        }
    }
}
