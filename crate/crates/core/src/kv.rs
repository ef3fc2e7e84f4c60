//! Plain `key=value` text: one entry per line, `#` starts a comment.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: IndexMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let (k, v) = content
                    .split_once('=')
                    .ok_or_else(|| Error::format(offset, format!("expected key=value, got `{content}`")))?;
                let key = k.trim();
                if key.is_empty() {
                    return Err(Error::format(offset, "empty key"));
                }
                if map.entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                    return Err(Error::format(offset, format!("duplicate key `{key}`")));
                }
            }
            offset += line.len() as u64 + 1;
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
