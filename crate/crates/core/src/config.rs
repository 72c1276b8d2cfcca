//! Run configuration: model, training and data settings addressed by flat
//! dotted keys such as `model.filters` or `training.lr_start`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::compute::checkpoint::digest_hex;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_freq: usize,
    pub chunk_len: usize,
    pub top_k: usize,
    pub stem: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_freq: 2,
            chunk_len: 256,
            top_k: 10,
            stem: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", value, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Value::Object(root)
}

/// Whether a value may replace a default of the given JSON kind.
fn compatible(default: &Value, new: &Value) -> bool {
    match (default, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(_), Value::Number(_)) => true,
        (Value::Bool(_), Value::Bool(_)) => true,
        (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(_)) => true,
        _ => false,
    }
}

/// Parses a command-line override value: JSON if it parses, else a string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Applies `overrides` (dotted key → value) on top of `self`. Unknown
    /// keys and type mismatches are errors.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = self.flat();
        for (key, value) in overrides {
            let Some(current) = flat.get(key) else {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            };
            if !compatible(current, value) {
                return Err(Error::Config(format!(
                    "config key `{key}` expects a value like {current}, got {value}"
                )));
            }
            flat.insert(key.clone(), value.clone());
        }
        let config: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a JSON object of dotted keys (nested objects are flattened too)
    /// and applies it over the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        Self::default().with_overrides(&flatten(&value))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.data.chunk_len == 0 || self.data.top_k == 0 {
            return Err(Error::Config("data.chunk_len and data.top_k must be positive".into()));
        }
        Ok(())
    }

    /// Flat dotted-key JSON with sorted keys.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.flat()).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn digest(&self) -> String {
        digest_hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}
