//! Flat `key = value` configuration files with `[section]` headers and `#`
//! comments; diff-friendly for experiment tracking.

use crate::error::{EngineError, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(EngineError::InvalidConfig(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let prev = cfg
                .sections
                .entry(section.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(EngineError::InvalidConfig(format!(
                    "line {}: duplicate key '{}'",
                    lineno + 1,
                    k.trim()
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    pub fn str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> &'a str {
        self.get(section, key).unwrap_or(default)
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        self.parse_or(section, key, default)
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        self.parse_or(section, key, default)
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        self.parse_or(section, key, default)
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(EngineError::InvalidConfig(format!(
                "[{section}] {key} = '{v}' is not a bool"
            ))),
        }
    }

    fn parse_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                EngineError::InvalidConfig(format!("[{section}] {key} = '{v}' has the wrong type"))
            }),
        }
    }

    /// Canonical text form, echoed into checkpoints.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (sec, kv) in &self.sections {
            if !sec.is_empty() {
                out.push_str(&format!("[{sec}]\n"));
            }
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
