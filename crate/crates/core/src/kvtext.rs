//! Flat `key=value` text: the format of config files, dataset manifests,
//! and run manifests. Lines starting with `#` and blank lines are ignored.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub fn parse(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub struct KvReader<'a> {
    map: &'a HashMap<String, String>,
    context: &'a str,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a HashMap<String, String>, context: &'a str) -> Self {
        KvReader { map, context }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Config(format!("{}: missing key '{key}'", self.context)))
    }

    fn parse_with<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value.parse::<T>().map_err(|e| {
            Error::Config(format!("{}: key '{key}' value '{value}': {e}", self.context))
        })
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            Some(v) => self.parse_with(key, v),
            None => Ok(default),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            Some(v) => self.parse_with(key, v),
            None => Ok(default),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            Some(v) => self.parse_with(key, v),
            None => Ok(default),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.parse_with(key, self.require(key)?)
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.parse_with(key, self.require(key)?)
    }
}

/// Renders pairs in the given order.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}
