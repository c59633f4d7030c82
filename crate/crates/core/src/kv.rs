//! Line-oriented `key = value` text used for configs and manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    /// Parses text; `#` starts a comment, blank lines are skipped, duplicate
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::usage(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::usage(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`, returning `None` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::usage(format!("line {line}: cannot parse {key} = {v:?}"))),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::usage(format!("line {line}: cannot parse {key} = {v:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::usage(format!("line {line}: unknown key {k}"))),
        }
    }
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_rejects_unknown() {
        let mut kv = KvMap::parse("# header\nepochs = 3\nsize = 64, 64 # trailing\n\nextra = 1\n").unwrap();
        assert_eq!(kv.take::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(kv.take_list::<usize>("size").unwrap(), Some(vec![64, 64]));
        assert_eq!(kv.take::<usize>("missing").unwrap(), None);
        assert!(kv.finish().unwrap_err().to_string().contains("extra"));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        assert!(KvMap::parse("no equals sign").is_err());
        let mut kv = KvMap::parse("a = x").unwrap();
        assert!(kv.take::<usize>("a").is_err());
    }
}
