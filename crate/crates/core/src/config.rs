//! Flat `key = value` configuration files with dotted keys.
//!
//! ```text
//! # comment
//! model.embed_dim = 36
//! model.depths = 1,1,3,1
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value pairs. Reads are tracked so unknown keys can be reported.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key {k:?}", n + 1)));
            }
            if map.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(map)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Overwrites `slot` with the parsed value when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Entries whose key starts with `prefix.`.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&p))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            used: Default::default(),
        }
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Keys never read through [`KvMap::get`].
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    /// Errors on the first key that was never read.
    pub fn reject_unused(&self) -> Result<()> {
        match self.unused().first() {
            Some(k) => Err(Error::Config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Serializes in key order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_sections() {
        let kv = KvMap::parse(
            "# run\nmodel.embed_dim = 36\nmodel.depths = 1, 1,3,1 # pairs\n\ntrain.lr=0.001\n",
        )
        .unwrap();
        assert_eq!(kv.parsed::<usize>("model.embed_dim").unwrap(), Some(36));
        assert_eq!(
            kv.list::<usize>("model.depths").unwrap(),
            Some(vec![1, 1, 3, 1])
        );
        let model = kv.section("model");
        assert_eq!(model.iter().count(), 2);
        assert_eq!(kv.unused(), vec!["train.lr".to_string()]);
        assert!(kv.reject_unused().is_err());
        kv.get("train.lr");
        assert!(kv.reject_unused().is_ok());
    }

    #[test]
    fn errors() {
        assert!(matches!(KvMap::parse("novalue"), Err(Error::Config(_))));
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        let kv = KvMap::parse("a = x").unwrap();
        assert!(kv.parsed::<f64>("a").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut kv = KvMap::new();
        kv.set("b.x", 0.1);
        kv.set("a.y", "1,2");
        let back = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(back.to_text(), kv.to_text());
        assert_eq!(back.parsed::<f64>("b.x").unwrap(), Some(0.1));
    }
}
