//! `key = value` config files and flag > file > default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

/// Parsed `key = value` lines. Keys are normalized to the flag spelling
/// (`base_lr` and `base-lr` are the same key).
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                UsageError(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    i + 1
                ))
            })?;
            let key = normalize_key(k);
            if key.is_empty() {
                return Err(UsageError(format!("config line {}: empty key", i + 1)).into());
            }
            let v = v.trim().trim_matches('"');
            if values.insert(key.clone(), v.to_string()).is_some() {
                return Err(UsageError(format!("config line {}: `{key}` set twice", i + 1)).into());
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)
            }
        }
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!("unknown config keys: {}", unknown.join(", "))).into())
        }
    }

    /// `flag`, else the file's value for `key`, else `None`.
    pub fn pick<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| UsageError(format!("config `{key} = {v}`: {e}")).into()),
        }
    }

    /// Boolean switches: a set flag wins, otherwise the file decides.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.pick::<bool>(key, None)?.unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let c = ConfigFile::parse(
            "# run\nbase_lr = 0.5  # trailing\n\nmode = nddr\ninit = \"diag:0.9,0.1\"\n",
        )
        .unwrap();
        assert_eq!(c.pick::<f64>("base-lr", None).unwrap(), Some(0.5));
        assert_eq!(c.pick::<f64>("base-lr", Some(0.1)).unwrap(), Some(0.1));
        assert_eq!(
            c.pick::<String>("init", None).unwrap().as_deref(),
            Some("diag:0.9,0.1")
        );
        assert_eq!(c.pick::<u64>("steps", None).unwrap(), None);
        assert!(c.check_keys(&["base-lr", "mode"]).is_err());
        c.check_keys(&["base-lr", "mode", "init"]).unwrap();
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        for text in ["novalue", "= 3", "a = 1\na = 2"] {
            let err = ConfigFile::parse(text).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{text}");
        }
        let c = ConfigFile::parse("steps = many").unwrap();
        assert!(c.pick::<usize>("steps", None).is_err());
    }
}
