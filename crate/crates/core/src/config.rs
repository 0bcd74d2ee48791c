//! Flat `section.key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored. Values are parsed lazily by the
//! consumer; [`KvDoc::finish`] reports keys nobody asked for, which catches
//! typos in hand-written configs.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(KvDoc {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(s) = self.raw(key) else {
            return Ok(None);
        };
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Inclusive range written `lo..hi`, or a single value meaning `lo = hi`.
    pub fn get_range<T: FromStr + Copy>(&self, key: &str) -> Result<Option<(T, T)>> {
        let Some(s) = self.raw(key) else {
            return Ok(None);
        };
        let parse = |p: &str| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`")))
        };
        match s.split_once("..") {
            Some((a, b)) => Ok(Some((parse(a)?, parse(b)?))),
            None => {
                let v = parse(s)?;
                Ok(Some((v, v)))
            }
        }
    }

    /// Errors if any key was never read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Like [`KvDoc::finish`], restricted to keys under the given `section.` prefixes.
    pub fn finish_sections(&self, sections: &[&str]) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .filter(|k| k.split_once('.').is_some_and(|(sec, _)| sections.contains(&sec)))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Keys in sorted order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Round-trip-exact float formatting for config and manifest files.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_ranges_and_lists() {
        let doc = KvDoc::parse(
            "# scenario\nscenario.M = 8\nknobs.U = 3..9  # inclusive\nknobs.tau_p = 4, 8\n\nscenario.f_c_ghz=28.0\n",
        )
        .unwrap();
        assert_eq!(doc.require::<usize>("scenario.M").unwrap(), 8);
        assert_eq!(doc.get_range::<usize>("knobs.U").unwrap(), Some((3, 9)));
        assert_eq!(doc.get_list::<usize>("knobs.tau_p").unwrap(), Some(vec![4, 8]));
        assert!(doc.finish().is_err());
        assert_eq!(doc.get::<f64>("scenario.f_c_ghz").unwrap(), Some(28.0));
        doc.finish().unwrap();
    }

    #[test]
    fn section_finish_ignores_other_sections() {
        let doc = KvDoc::parse("train.lr = 0.1\ntrain.typo = 3\nsweep.grid = 0\n").unwrap();
        doc.get::<f64>("train.lr").unwrap();
        assert!(doc.finish_sections(&["sweep"]).is_err());
        let err = doc.finish_sections(&["train"]).unwrap_err().to_string();
        assert!(err.contains("train.typo") && !err.contains("sweep"), "{err}");
        doc.finish_sections(&["model"]).unwrap();
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        let doc = KvDoc::parse("a = x\n").unwrap();
        assert!(doc.get::<f64>("a").is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1e-23, 7.82, -3.0, 123456.789] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
