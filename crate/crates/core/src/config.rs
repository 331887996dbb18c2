//! Flat `key = value` configuration text.
//!
//! One entry per line, `#` starts a comment, lists are comma separated.
//! Every key must be consumed by the typed readers; leftovers are reported
//! as unknown so typos do not pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            kv.set(k.trim(), v.trim())?;
        }
        Ok(kv)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("bad key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn is_used(&self, key: &str) -> bool {
        self.used.borrow().contains(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("{key} = {v:?} is not valid"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key} = {v:?}: bad list element {s:?}"))))
                .collect(),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    /// Errors if any entry was never read.
    pub fn ensure_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<_> = self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

pub fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let mut kv = KeyValues::parse("# header\na = 3\nlist = 1, 2,4 # trailing\n\nflag = yes\n").unwrap();
        kv.apply_override("a=5").unwrap();
        assert_eq!(kv.get::<u32>("a", 0).unwrap(), 5);
        assert_eq!(kv.get_list::<usize>("list", &[]).unwrap(), vec![1, 2, 4]);
        assert!(kv.get_bool("flag", false).unwrap());
        assert_eq!(kv.get::<f64>("missing", 1.5).unwrap(), 1.5);
        kv.ensure_consumed().unwrap();
    }

    #[test]
    fn errors() {
        assert!(KeyValues::parse("novalue\n").is_err());
        let kv = KeyValues::parse("x = abc\ny = 1").unwrap();
        assert!(kv.get::<u32>("x", 0).is_err());
        assert!(kv.ensure_consumed().is_err());
    }
}
