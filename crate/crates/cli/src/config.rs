//! Flat `key=value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Values from a config file, consumed key by key. Keys are flag names
/// without the leading dashes; `#` starts a comment.
#[derive(Debug, Default)]
pub struct FileValues {
    origin: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl FileValues {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileValues::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{}:{}: expected key=value, got {raw:?}", origin.display(), n + 1)));
            };
            let key = k.trim().replace('_', "-");
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{}:{}: duplicate key {key}", origin.display(), n + 1)));
            }
        }
        Ok(FileValues { origin: Some(origin.to_path_buf()), values })
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match from_file {
            Some(s) => s.parse().map_err(|e| CliError::Usage(format!("{}: bad value for {key}: {e}", self.origin_name()))),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("{}: bad value for {key}: {e}", self.origin_name()))))
            .transpose()
    }

    /// A switch is on if the flag is set or the file says `true`.
    pub fn pick_switch(&mut self, flag: bool, key: &str) -> Result<bool, CliError> {
        let file = self.pick_opt::<bool>(None, key)?;
        Ok(flag || file.unwrap_or(false))
    }

    /// Rejects whatever keys were not consumed.
    pub fn finish(self) -> Result<(), CliError> {
        if let Some(k) = self.values.keys().next() {
            return Err(CliError::Usage(format!("{}: unknown key {k:?}", self.origin_name())));
        }
        Ok(())
    }

    fn origin_name(&self) -> String {
        self.origin.as_ref().map_or_else(|| "config".into(), |p| p.display().to_string())
    }
}

/// Resolves each setting from flag, file or default and records the effective
/// value for the run header.
pub struct Settings {
    file: FileValues,
    header: Vec<String>,
}

impl Settings {
    pub fn new(file: FileValues) -> Self {
        Settings { file, header: Vec::new() }
    }

    pub fn value<T>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.file.pick(flag, key, default)?;
        self.header.push(format!("{key}={v}"));
        Ok(v)
    }

    pub fn optional<T>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.file.pick_opt(flag, key)?;
        self.header.push(format!("{key}={}", v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())));
        Ok(v)
    }

    pub fn required<T>(&mut self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(flag, key)?.ok_or_else(|| CliError::Usage(format!("missing --{key}")))
    }

    pub fn optional_path(&mut self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>, CliError> {
        let v = self.file.pick_opt(flag, key)?;
        self.header.push(format!("{key}={}", v.as_ref().map_or_else(|| "none".to_string(), |p: &PathBuf| p.display().to_string())));
        Ok(v)
    }

    pub fn path(&mut self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        self.optional_path(flag, key)?.ok_or_else(|| CliError::Usage(format!("missing --{key}")))
    }

    pub fn switch(&mut self, flag: bool, key: &str) -> Result<bool, CliError> {
        let v = self.file.pick_switch(flag, key)?;
        self.header.push(format!("{key}={v}"));
        Ok(v)
    }

    /// Rejects leftover file keys, then prints the run header to stderr.
    pub fn finish(self, command: &str) -> Result<(), CliError> {
        self.file.finish()?;
        eprintln!("# spn {command} {}", self.header.join(" "));
        Ok(())
    }
}
