//! Flat key-value config files and flag/file/default resolution.
//!
//! A config file holds one `key = value` pair per line with `#` comments;
//! keys match the long flag names. Explicit flags beat file entries, file
//! entries beat built-in defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "config file {} line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    i + 1
                );
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// flag > config file > default.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")),
            None => Ok(default),
        }
    }

    /// Like `resolve` but with no built-in default.
    pub fn resolve_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_and_resolves_with_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment\nepochs = 7\nlearning-rate = 0.5  # inline").unwrap();
        drop(f);
        let cfg = ConfigFile::load(&path).unwrap();
        assert_eq!(cfg.resolve::<usize>(None, "epochs", 30).unwrap(), 7);
        assert_eq!(cfg.resolve::<usize>(Some(3), "epochs", 30).unwrap(), 3);
        assert_eq!(cfg.resolve::<f64>(None, "learning-rate", 1e-3).unwrap(), 0.5);
        assert_eq!(cfg.resolve::<u64>(None, "seed", 42).unwrap(), 42);
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "epochs 7\n").unwrap();
        assert!(ConfigFile::load(&path).is_err());
    }
}
