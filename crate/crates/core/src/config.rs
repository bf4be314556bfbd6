//! Flat key=value configuration files: one pair per line, `#` comments,
//! whitespace-tolerant. Typed getters validate on access.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: IndexMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required key '{key}'")))
    }

    fn typed<T: FromStr>(&self, key: &str, kind: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("key '{key}': '{raw}' is not a {kind}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.typed(key, "non-negative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.typed(key, "non-negative integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.typed(key, "number")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!("key '{key}': '{other}' is not a bool"))),
        }
    }

    /// Typed getter with a default when the key is absent.
    pub fn get_usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.get_usize(key),
        }
    }

    pub fn get_f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.get_f64(key),
        }
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.get_bool(key),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let cfg = Config::parse("# training\nlr = 0.0001\n\nsteps=100\nname = desk run\n").unwrap();
        assert_eq!(cfg.get_f64("lr").unwrap(), 1e-4);
        assert_eq!(cfg.get_usize("steps").unwrap(), 100);
        assert_eq!(cfg.get("name"), Some("desk run"));
    }

    #[test]
    fn value_may_contain_equals() {
        let cfg = Config::parse("expr=a=b").unwrap();
        assert_eq!(cfg.get("expr"), Some("a=b"));
    }

    #[test]
    fn malformed_duplicate_and_missing_keys() {
        assert!(Config::parse("just a line").is_err());
        assert!(Config::parse("a=1\na=2").is_err());
        let cfg = Config::parse("a=1").unwrap();
        assert!(cfg.require("b").is_err());
        assert!(cfg.get_usize("a").is_ok());
        assert!(Config::parse("=1").is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let cfg = Config::parse("steps=soon").unwrap();
        let err = cfg.get_usize("steps").unwrap_err().to_string();
        assert!(err.contains("steps") && err.contains("soon"));
    }

    #[test]
    fn bool_forms_and_defaults() {
        let cfg = Config::parse("a=yes\nb=0").unwrap();
        assert!(cfg.get_bool("a").unwrap());
        assert!(!cfg.get_bool("b").unwrap());
        assert!(cfg.get_bool_or("missing", true).unwrap());
        assert_eq!(cfg.get_usize_or("missing", 7).unwrap(), 7);
        assert_eq!(cfg.get_f64_or("missing", 0.5).unwrap(), 0.5);
    }
}
