//! Flat `key = value` config files and flag/file/default resolution.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, CliError};

/// Keys are flag names without the leading dashes; `_` and `-` are
/// interchangeable. Blank lines and lines starting with `#` are ignored.
#[derive(Debug, Default)]
pub struct ConfigFile {
    origin: String,
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{origin}:{}: expected key = value", i + 1)))?;
            let k = normalize(k);
            if values.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(invalid(format!("{origin}:{}: duplicate key {k}", i + 1)));
            }
        }
        Ok(ConfigFile {
            origin: origin.to_string(),
            values,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let key = normalize(key);
        let v = self.values.get(&key)?;
        self.used.borrow_mut().insert(key);
        Some(v)
    }

    /// Flag if given, else the file's value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = match self.raw(key) {
            Some(v) => Some(
                v.parse::<T>()
                    .map_err(|e| invalid(format!("{}: {key} = {v}: {e}", self.origin)))?,
            ),
            None => None,
        };
        Ok(flag.or(from_file))
    }

    /// Errors on keys that no setting consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(invalid(format!("{}: unknown keys: {}", self.origin, unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let c = ConfigFile::parse("# run\nepochs = 7\nlearning_rate=0.01\n", "c").unwrap();
        assert_eq!(c.pick(Some(3usize), "epochs", 100).unwrap(), 3);
        assert_eq!(c.pick(None, "epochs", 100usize).unwrap(), 7);
        assert_eq!(c.pick(None, "learning-rate", 1e-4).unwrap(), 0.01);
        assert_eq!(c.pick(None, "seed", 9u64).unwrap(), 9);
        c.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let c = ConfigFile::parse("epochs = 1\nepoch = 2\n", "c").unwrap();
        c.pick(None, "epochs", 0usize).unwrap();
        assert!(c.finish().unwrap_err().to_string().contains("epoch"));
        assert!(ConfigFile::parse("a = 1\na = 2\n", "c").is_err());
        assert!(ConfigFile::parse("just words\n", "c").is_err());
        let c = ConfigFile::parse("epochs = many\n", "c").unwrap();
        assert_eq!(c.pick(None, "epochs", 0usize).unwrap_err().exit_code(), 2);
    }
}
