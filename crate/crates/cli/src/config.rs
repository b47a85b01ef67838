//! Flat dotted-key configuration: `{"adapt.k": 3, "data.seed": 7}`.
//!
//! Keys are applied in order (config file, then `--set`, then dedicated
//! flags), each one validated by round-tripping the section through serde so
//! a bad value is reported against the key that introduced it.

use std::fs;
use std::path::Path;

use cdtta_core::adaptation::{AdaptConfig, PretrainConfig};
use cdtta_core::synth::{cyclic_schedule, DataConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub const DEFAULT_SEGMENT: usize = 200;
pub const DEFAULT_CYCLES: usize = 10;

#[derive(Debug, Clone)]
pub struct Settings {
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    segment: usize,
    cycles: usize,
    explicit_schedule: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            segment: DEFAULT_SEGMENT,
            cycles: DEFAULT_CYCLES,
            explicit_schedule: false,
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut s = Settings::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let map: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: expected a flat JSON object: {e}", path.display())))?;
            for (k, v) in map {
                s.set(&k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
            s.set(k, parse_value(v))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let bad = |msg: String| CliError::Config(format!("{key}: {msg}"));
        let mut parts = key.split('.');
        let section = parts.next().unwrap_or_default();
        let path: Vec<&str> = parts.collect();
        if path.is_empty() {
            return Err(bad("expected SECTION.FIELD".into()));
        }
        match section {
            "data" => match path.as_slice() {
                ["segment"] => self.segment = from_value(value).map_err(bad)?,
                ["cycles"] => self.cycles = from_value(value).map_err(bad)?,
                _ => {
                    if path == ["schedule"] {
                        self.explicit_schedule = true;
                    }
                    self.data = patch(&self.data, &path, value).map_err(bad)?;
                }
            },
            "pretrain" => self.pretrain = patch(&self.pretrain, &path, value).map_err(bad)?,
            "adapt" => self.adapt = patch(&self.adapt, &path, value).map_err(bad)?,
            other => return Err(bad(format!("unknown section '{other}'"))),
        }
        Ok(())
    }

    /// Data config with the schedule rebuilt from segment/cycles unless one
    /// was given explicitly.
    pub fn data_config(&self) -> Result<DataConfig, CliError> {
        let mut c = self.data.clone();
        if !self.explicit_schedule {
            c.schedule = cyclic_schedule(&c.domains, self.segment, self.cycles);
        }
        c.validate().map_err(|e| CliError::Config(format!("data: {e}")))?;
        Ok(c)
    }
}

/// JSON literal if it parses, otherwise a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn from_value<T: DeserializeOwned>(v: Value) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

fn patch<T: Serialize + DeserializeOwned>(current: &T, path: &[&str], value: Value) -> Result<T, String> {
    let mut root = serde_json::to_value(current).map_err(|e| e.to_string())?;
    let mut slot = &mut root;
    for p in path {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(*p))
            .ok_or_else(|| format!("unknown key '{p}'"))?;
    }
    *slot = value;
    from_value(root)
}
