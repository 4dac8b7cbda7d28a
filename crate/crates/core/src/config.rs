//! Plain `key = value` run configs.
//!
//! Values are resolved with precedence flags > file > defaults, and the
//! resolved set is written next to a run's outputs so the run can be
//! repeated from that file alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, n + 1, format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(path, n + 1, "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Starts from `defaults`; every later key must be one of them.
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        let values = defaults
            .iter()
            .map(|(k, v)| (k.to_string(), (v.to_string(), Source::Default)))
            .collect();
        Self { values }
    }

    fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = (value.to_string(), source);
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_pairs(&text, path)? {
            self.set(&k, &v, Source::File)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_flags<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v.trim(), Source::Flag)?;
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, key: &str, value: Option<impl ToString>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string(), Source::Flag),
            None => Ok(()),
        }
    }

    /// Overwrites a value as if it had been given as a flag.
    pub fn record(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.set(key, &value.to_string(), Source::Flag)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|(v, _)| v.as_str())
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse::<T>()
            .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
    }

    /// Empty or `none` reads as `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key)? {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)?.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(Error::Config(format!("{key} = {other:?} is not a boolean"))),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key}: bad entry {s:?}: {e}")))
            })
            .collect()
    }

    pub fn log_resolution(&self) {
        for (k, (v, s)) in &self.values {
            log::info!("config {k} = {v} ({s})");
        }
    }

    /// Sorted `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (v, _)) in &self.values {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: &[(&str, &str)] = &[("seed", "0"), ("steps", "100"), ("name", "run")];

    #[test]
    fn precedence_is_flags_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.cfg");
        std::fs::write(&f, "# comment\nseed = 5\n\nsteps=20  # trailing\n").unwrap();
        let mut c = RunConfig::with_defaults(DEFAULTS);
        c.apply_file(&f).unwrap();
        c.apply_flags(&["steps=7"]).unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 5);
        assert_eq!(c.get::<usize>("steps").unwrap(), 7);
        assert_eq!(c.raw("name").unwrap(), "run");
        assert_eq!(c.source("seed"), Some(Source::File));
        assert_eq!(c.source("steps"), Some(Source::Flag));
        assert_eq!(c.source("name"), Some(Source::Default));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::with_defaults(DEFAULTS);
        c.apply_flags(&["name=x y"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resolved.cfg");
        c.write(&p).unwrap();
        let mut d = RunConfig::with_defaults(DEFAULTS);
        d.apply_file(&p).unwrap();
        assert_eq!(c.to_text(), d.to_text());
    }

    #[test]
    fn errors_name_the_line_or_key() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.cfg");
        std::fs::write(&f, "seed = 1\nnot a pair\n").unwrap();
        let mut c = RunConfig::with_defaults(DEFAULTS);
        assert!(matches!(c.apply_file(&f), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(c.apply_flags(&["bogus=1"]), Err(Error::Config(_))));
        c.apply_flags(&["steps=abc"]).unwrap();
        assert!(c.get::<usize>("steps").is_err());
        assert_eq!(c.get_list::<usize>("seed").unwrap(), vec![0], "a rejected file applies nothing");
    }
}
