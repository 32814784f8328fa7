//! Flat `key = value` configuration text.
//!
//! One entry per line, dotted keys, `#` starts a comment. Later entries
//! override earlier ones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "line {}: expected `key = value`, got `{}`",
                    lineno + 1,
                    raw.trim()
                ))
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Format(format!("line {}: invalid key `{key}`", lineno + 1)));
            }
            out.set(key, value.trim());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
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
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e: V::Err| Error::config(key.to_string(), format!("cannot parse `{s}`: {e}"))),
        }
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: fmt::Display,
    {
        let Some(s) = self.raw(key) else { return Ok(None) };
        s.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e: V::Err| Error::config(key.to_string(), format!("cannot parse `{item}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let lead = format!("{prefix}.");
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn merge_section(&mut self, prefix: &str, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Copies every entry of `other`, overriding.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn join_list<V: fmt::Display>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KvConfig::parse("# header\nmodel.base_width = 8\n\ntrain.lr=1e-4 # inline\nmodel.base_width = 4\n")
            .unwrap();
        assert_eq!(kv.get::<usize>("model.base_width").unwrap(), Some(4));
        assert_eq!(kv.get::<f64>("train.lr").unwrap(), Some(1e-4));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn round_trips_through_text() {
        let mut kv = KvConfig::new();
        kv.set("a.b", 3);
        kv.set("list", join_list(&[0.25, 0.5]));
        let back = KvConfig::parse(&kv.to_string()).unwrap();
        assert_eq!(back, kv);
        assert_eq!(back.get_list::<f64>("list").unwrap(), Some(vec![0.25, 0.5]));
    }

    #[test]
    fn bad_value_names_the_key() {
        let kv = KvConfig::parse("train.epochs = many").unwrap();
        let err = kv.get::<usize>("train.epochs").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn missing_equals_is_rejected() {
        assert!(KvConfig::parse("just words").is_err());
    }

    #[test]
    fn section_strips_prefix() {
        let kv = KvConfig::parse("model.x = 1\ntrain.y = 2").unwrap();
        let s = kv.section("model");
        assert_eq!(s.raw("x"), Some("1"));
        assert!(!s.contains("y"));
    }
}
