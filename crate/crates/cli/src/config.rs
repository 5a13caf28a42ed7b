//! Layered settings: built-in defaults, then a `key=value` file, then flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys are flag names without the leading dashes.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", n + 1));
        }
    }
    Ok(map)
}

/// Resolves each setting from its flag, the config file or a default, and
/// records the result for printing.
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Vec<(&'static str, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            None => BTreeMap::new(),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_config(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
        };
        Ok(Self {
            file,
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &'static str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key}: invalid value {raw:?}: {e}"))),
        }
    }

    /// Flag, else file, else `default`.
    pub fn value<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let from_file = self.file_value(key)?;
        let v = flag.or(from_file).unwrap_or(default);
        self.resolved.push((key, v.to_string()));
        Ok(v)
    }

    /// Flag, else file; absent is allowed.
    pub fn optional<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let from_file = self.file_value(key)?;
        let v = flag.or(from_file);
        self.resolved
            .push((key, v.as_ref().map_or_else(|| "(unset)".to_string(), T::to_string)));
        Ok(v)
    }

    /// Flag, else file; absent is a usage error.
    pub fn required<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{key}")))
    }

    /// A presence flag: set on the command line, or `true` in the file.
    pub fn switch(&mut self, key: &'static str, flag: bool) -> Result<bool, CliError> {
        let from_file: Option<bool> = self.file_value(key)?;
        let v = flag || from_file.unwrap_or(false);
        self.resolved.push((key, v.to_string()));
        Ok(v)
    }

    /// Rejects config keys no setting asked for and returns the resolved
    /// settings in resolution order.
    pub fn finish(self) -> Result<Vec<(&'static str, String)>, CliError> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|k| k.as_str()).collect();
            return Err(CliError::Usage(format!("unknown config key(s): {}", list.join(", "))));
        }
        Ok(self.resolved)
    }
}
