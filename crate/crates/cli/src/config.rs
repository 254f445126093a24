//! Config documents, flag overrides, seeds and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "LATCHLAB_SEED";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<latchlab::Error> for CliError {
    fn from(e: latchlab::Error) -> Self {
        match e {
            latchlab::Error::InvalidModel { .. } | latchlab::Error::InvalidParams(_) | latchlab::Error::Json(_) => {
                Self::validation(e.to_string())
            }
            other => Self::failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

/// A config document as loaded from disk.
pub struct ConfigDoc {
    source: Option<(String, String)>,
    values: Map<String, Value>,
}

impl ConfigDoc {
    pub fn empty() -> Self {
        Self {
            source: None,
            values: Map::new(),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::empty());
        };
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {name}: {e}")))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{name}:{}: {e}", e.line())))?;
        let Value::Object(values) = value else {
            return Err(CliError::validation(format!("{name}:1: config must be a JSON object")));
        };
        Ok(Self {
            source: Some((name, text)),
            values,
        })
    }

    fn line_of(&self, key: &str) -> Option<(String, usize)> {
        let (name, text) = self.source.as_ref()?;
        let needle = format!("\"{key}\"");
        text.lines()
            .position(|l| l.contains(&needle))
            .map(|i| (name.clone(), i + 1))
    }

    /// Resolve a typed config: file values, then flag overrides, then the
    /// seed. `validate` runs on the merged result; its errors are pinned to
    /// the line of the first key they mention.
    pub fn resolve<T: DeserializeOwned + Serialize>(
        &self,
        overrides: Map<String, Value>,
        seed_flag: Option<u64>,
        validate: impl FnOnce(&T) -> latchlab::Result<()>,
    ) -> Result<(T, u64), CliError> {
        if let Some((name, text)) = &self.source {
            if let Err(e) = serde_json::from_str::<T>(text) {
                return Err(CliError::validation(format!("{name}:{}: {e}", e.line())));
            }
        }
        let mut merged = self.values.clone();
        let seed = match seed_flag {
            Some(s) => s,
            None => match merged.get("base_seed") {
                Some(v) => v
                    .as_u64()
                    .ok_or_else(|| CliError::validation("base_seed must be a non-negative integer"))?,
                None => seed_from_env()?,
            },
        };
        merged.extend(overrides);
        merged.insert("base_seed".into(), Value::from(seed));
        let config: T = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::validation(format!("invalid option: {e}")))?;
        if let Err(e) = validate(&config) {
            let message = e.to_string();
            let location = self
                .values
                .keys()
                .filter(|k| message.contains(k.as_str()))
                .max_by_key(|k| k.len())
                .and_then(|k| self.line_of(k));
            return Err(CliError::validation(match location {
                Some((name, line)) => format!("{name}:{line}: {message}"),
                None => message,
            }));
        }
        Ok((config, seed))
    }
}

fn seed_from_env() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::validation(format!("{SEED_ENV}={v} is not a 64-bit unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Insert `key: value` when the flag was given.
pub fn set<V: Into<Value>>(map: &mut Map<String, Value>, key: &str, value: Option<V>) {
    if let Some(v) = value {
        map.insert(key.into(), v.into());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reproducibility record written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub base_seed: u64,
    pub config: Value,
    /// Input files read by the run, with their checksums.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name to sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), e.line())))
    }
}
