//! Sectioned key=value experiment configs.
//!
//! The format is deliberately flat so experiment records diff cleanly:
//! `[section]` headers, one `key = value` per line, `#` or `;` comments.
//! Unknown sections or keys are rejected with their line number; typed
//! accessors report the offending line on parse failures.

use std::fmt;

#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl ConfigError {
    fn at(line: usize, msg: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            msg: msg.into(),
        }
    }

    pub fn plain(msg: impl Into<String>) -> Self {
        Self {
            line: None,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {n}: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

/// Allowed (section, keys) pairs for one subcommand.
pub type Schema = &'static [(&'static str, &'static [&'static str])];

#[derive(Debug, Default)]
pub struct Config {
    entries: Vec<Entry>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find(['#', ';']) {
                Some(p) => &raw[..p],
                None => raw,
            };
            let trimmed = stripped.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(ConfigError::at(line, "empty section name"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line, format!("expected key = value, got '{trimmed}'")))?;
            let section = section
                .clone()
                .ok_or_else(|| ConfigError::at(line, "key before any [section] header"))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::at(line, "empty key"));
            }
            if let Some(prev) = entries
                .iter()
                .find(|e| e.section == section && e.key == key)
            {
                return Err(ConfigError::at(
                    line,
                    format!("duplicate key '{}.{key}' (first set on line {})", section, prev.line),
                ));
            }
            entries.push(Entry {
                section,
                key,
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self { entries })
    }

    /// Applies one `--set section.key=value` override (replaces or appends).
    pub fn apply_set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            ConfigError::plain(format!("--set expects section.key=value, got '{spec}'"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            ConfigError::plain(format!("--set key must be section.key, got '{path}'"))
        })?;
        let (section, key, value) = (section.trim(), key.trim(), value.trim());
        if section.is_empty() || key.is_empty() {
            return Err(ConfigError::plain(format!("--set has an empty name in '{spec}'")));
        }
        match self
            .entries
            .iter_mut()
            .find(|e| e.section == section && e.key == key)
        {
            Some(e) => e.value = value.to_string(),
            None => self.entries.push(Entry {
                section: section.to_string(),
                key: key.to_string(),
                value: value.to_string(),
                line: 0,
            }),
        }
        Ok(())
    }

    /// Rejects entries outside the schema, naming the key and its line.
    pub fn validate(&self, schema: Schema) -> Result<(), ConfigError> {
        for e in &self.entries {
            match schema.iter().find(|(s, _)| *s == e.section) {
                None => {
                    return Err(ConfigError::at(
                        e.line,
                        format!("unknown section '[{}]'", e.section),
                    ))
                }
                Some((_, keys)) if !keys.contains(&e.key.as_str()) => {
                    return Err(ConfigError::at(
                        e.line,
                        format!("unknown key '{}.{}'", e.section, e.key),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.section == section && e.key == key)
            .map(|e| e.value.as_str())
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.section == section && e.key == key)
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                ConfigError::at(e.line, format!("bad value for '{section}.{key}': {err}"))
            }),
        }
    }

    fn parsed_list<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) if e.value.is_empty() => Ok(Some(Vec::new())),
            Some(e) => e
                .value
                .split(',')
                .map(|v| v.trim().parse::<T>())
                .collect::<Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|err| {
                    ConfigError::at(e.line, format!("bad value for '{section}.{key}': {err}"))
                }),
        }
    }

    fn missing(section: &str, key: &str) -> ConfigError {
        ConfigError::plain(format!("missing required config key '{section}.{key}'"))
    }

    pub fn f64(&self, s: &str, k: &str) -> Result<Option<f64>, ConfigError> {
        self.parsed(s, k)
    }

    pub fn require_f64(&self, s: &str, k: &str) -> Result<f64, ConfigError> {
        self.parsed(s, k)?.ok_or_else(|| Self::missing(s, k))
    }

    pub fn u64_or(&self, s: &str, k: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.parsed(s, k)?.unwrap_or(default))
    }

    pub fn require_usize(&self, s: &str, k: &str) -> Result<usize, ConfigError> {
        self.parsed(s, k)?.ok_or_else(|| Self::missing(s, k))
    }

    pub fn usize_or(&self, s: &str, k: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.parsed(s, k)?.unwrap_or(default))
    }

    pub fn u32_or(&self, s: &str, k: &str, default: u32) -> Result<u32, ConfigError> {
        Ok(self.parsed(s, k)?.unwrap_or(default))
    }

    pub fn f64_or(&self, s: &str, k: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.parsed(s, k)?.unwrap_or(default))
    }

    pub fn bool_or(&self, s: &str, k: &str, default: bool) -> Result<bool, ConfigError> {
        Ok(self.parsed(s, k)?.unwrap_or(default))
    }

    pub fn require_str(&self, s: &str, k: &str) -> Result<&str, ConfigError> {
        self.get(s, k).ok_or_else(|| Self::missing(s, k))
    }

    pub fn require_list_f64(&self, s: &str, k: &str) -> Result<Vec<f64>, ConfigError> {
        self.parsed_list(s, k)?.ok_or_else(|| Self::missing(s, k))
    }

    pub fn list_f64_or(&self, s: &str, k: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        Ok(self.parsed_list(s, k)?.unwrap_or_else(|| default.to_vec()))
    }

    pub fn require_list_u32(&self, s: &str, k: &str) -> Result<Vec<u32>, ConfigError> {
        self.parsed_list(s, k)?.ok_or_else(|| Self::missing(s, k))
    }

    pub fn list_u32_or(&self, s: &str, k: &str, default: &[u32]) -> Result<Vec<u32>, ConfigError> {
        Ok(self.parsed_list(s, k)?.unwrap_or_else(|| default.to_vec()))
    }

    pub fn list_usize_or(
        &self,
        s: &str,
        k: &str,
        default: &[usize],
    ) -> Result<Vec<usize>, ConfigError> {
        Ok(self.parsed_list(s, k)?.unwrap_or_else(|| default.to_vec()))
    }

    pub fn require_list_str(&self, s: &str, k: &str) -> Result<Vec<String>, ConfigError> {
        self.parsed_list(s, k)?.ok_or_else(|| Self::missing(s, k))
    }

    /// Effective `section.key=value` lines, sorted, for the run manifest.
    pub fn effective(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}.{}={}", e.section, e.key, e.value))
            .collect();
        out.sort();
        out
    }
}
