//! Option values from an optional TOML file.
//!
//! Keys are the long flag names (`c`, `tau`, `det-embs`, ...). A key inside
//! a table named after the subcommand (`[sweep-c]`) beats a top-level key.
//! Flags given on the command line beat both.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::Result;
use toml::{Table, Value};

use crate::UsageError;

#[derive(Debug, Default)]
pub struct Settings {
    root: Table,
    section: Option<Table>,
}

fn scalar_text(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| scalar_text(key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        other => return Err(UsageError(format!("config key `{key}` has unsupported value {other}")).into()),
    })
}

impl Settings {
    pub fn load(path: Option<&Path>, subcommand: &str) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut root: Table = text
            .parse()
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let section = match root.remove(subcommand) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(UsageError(format!("config key `{subcommand}` must be a table")).into()),
            None => None,
        };
        Ok(Settings { root, section })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.section
            .as_ref()
            .and_then(|s| s.get(key))
            .or_else(|| self.root.get(key))
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let text = scalar_text(key, v)?;
        text.parse::<T>()
            .map(Some)
            .map_err(|e| UsageError(format!("config key `{key}`: {e}")).into())
    }

    /// Flag value if given, else the config value.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn pick_or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| UsageError(format!("missing required option --{key}")).into())
    }

    /// A switch is on if given on the command line or set true in the config.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }
}

/// Comma-separated values.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T> FromStr for List<T>
where
    T: FromStr,
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<Vec<T>, String>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str, sub: &str) -> Settings {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        Settings::load(Some(&path), sub).unwrap()
    }

    #[test]
    fn flags_beat_sections_beat_root() {
        let s = settings("c = 0.5\n[sweep-c]\nc = 0.25\n", "sweep-c");
        assert_eq!(s.pick(None::<f64>, "c").unwrap(), Some(0.25));
        assert_eq!(s.pick(Some(0.9), "c").unwrap(), Some(0.9));
        let s = settings("c = 0.5\n[sweep-c]\nc = 0.25\n", "rescore");
        assert_eq!(s.pick(None::<f64>, "c").unwrap(), Some(0.5));
    }

    #[test]
    fn arrays_become_lists() {
        let s = settings("grid = [0, 0.5, 1]\nseeds = \"1,2\"\n", "x");
        assert_eq!(s.get::<List<f64>>("grid").unwrap(), Some(List(vec![0.0, 0.5, 1.0])));
        assert_eq!(s.get::<List<u64>>("seeds").unwrap(), Some(List(vec![1, 2])));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let s = settings("k = \"many\"\n", "x");
        let err = s.get::<usize>("k").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
