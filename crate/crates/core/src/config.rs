//! Flat `key = value` configuration text with dotted section names.
//!
//! Blank lines and `#` comments are ignored. Every key may appear once; keys
//! are consumed by their readers and any left over are reported as unknown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key `{key}`", idx + 1)));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), idx + 1))
                .is_some()
            {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}` (line {line}): cannot parse `{v}`"))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| {
                    Error::Config(format!("key `{key}` (line {line}): cannot parse list `{v}`"))
                }),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "unknown key `{key}` (line {line})"
            ))),
        }
    }

    /// Drains every key under `prefix.` into a separate map.
    pub fn split_section(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        let mut out = KeyValues::default();
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k, v);
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, (v, _)) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
