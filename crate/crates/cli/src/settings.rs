//! Merges command-line flags with an optional `key = value` config file.
//! Flags win; every file key must be consumed by the command or the run is
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

pub struct Settings {
    file: BTreeMap<String, String>,
    source: String,
    used: BTreeSet<String>,
}

/// Parses `key = value` lines; `#` starts a comment. Keys use the long flag
/// spelling with either `-` or `_`.
pub fn parse_config(text: &str, source: &str) -> Result<BTreeMap<String, String>, Failure> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("{source}:{}: expected `key = value`", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(Failure::usage(format!("{source}:{}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Settings { file: BTreeMap::new(), source: String::new(), used: BTreeSet::new() });
        };
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{source}: {e}")))?;
        Ok(Settings { file: parse_config(&text, &source)?, source, used: BTreeSet::new() })
    }

    /// The flag value, else the file value, else `None`.
    pub fn opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_owned());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Failure::usage(format!("{}: bad value `{raw}` for `{key}`: {e}", self.source))),
        }
    }

    pub fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    /// Boolean switch: set by the flag, or by `true`/`false` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        Ok(flag || self.opt::<bool>(key, None)?.unwrap_or(false))
    }

    /// Rejects file keys no command option asked for.
    pub fn finish(self) -> Result<(), Failure> {
        let unknown: Vec<&str> = self.file.keys().filter(|k| !self.used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Failure::usage(format!("{}: unknown key(s): {}", self.source, unknown.join(", "))))
        }
    }
}
