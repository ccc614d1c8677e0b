//! `key = value` text records with `#` comments.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered entries of a record. Keys may repeat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    pub entries: Vec<(String, String)>,
}

impl Record {
    pub fn parse(text: &str, what: &'static str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
                what,
                detail: format!("line {}: expected key = value, got {raw:?}", n + 1),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Malformed {
                    what,
                    detail: format!("line {}: empty key", n + 1),
                });
            }
            entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(Record { entries })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Last value of `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: FromStr>(&self, key: &str, what: &'static str) -> Result<T> {
        let v = self.get(key).ok_or_else(|| Error::Malformed {
            what,
            detail: format!("missing key {key:?}"),
        })?;
        parse_value(key, v, what)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, v: &str, what: &'static str) -> Result<T> {
    v.parse().map_err(|_| Error::Malformed {
        what,
        detail: format!("bad value {v:?} for {key:?}"),
    })
}
