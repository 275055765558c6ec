//! Config-file values merged under command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Every key a config file may set. Keys mirror long flag names; `_` and
/// `-` are interchangeable.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "cache",
    "mock",
    "mock-script",
    "concurrency",
    "endpoint",
    "model",
    "api-key-env",
    "assistant-prefill",
    "dataset",
    "kb",
    "vectors",
    "query-vectors",
    "query-file",
    "adapter",
    "provider",
    "dim",
    "mode",
    "k",
    "ks",
    "out",
    "records",
    "failures",
    "texts-out",
    "validation",
    "trace",
    "learning-rate",
    "max-steps",
    "positive-cap",
    "negative-cap",
    "batch-size",
    "augmentations",
    "d-out",
    "init-noise",
    "validation-every",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: Map<String, Value>,
    source: Option<PathBuf>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
        let Value::Object(raw) = doc else {
            return Err(CliError::Validation(format!(
                "--config {}: expected a JSON object",
                path.display()
            )));
        };
        let mut values = Map::new();
        for (key, value) in raw {
            let norm = key.replace('_', "-");
            if !KNOWN_KEYS.contains(&norm.as_str()) {
                return Err(CliError::Validation(format!(
                    "--config {}: unknown key {key:?}",
                    path.display()
                )));
            }
            values.insert(norm, value);
        }
        Ok(Self {
            values,
            source: Some(path.to_path_buf()),
        })
    }

    /// The flag value if given, else the config value.
    pub fn pick<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|e| {
                CliError::Validation(format!(
                    "config key {key:?} in {}: {e}",
                    self.source.as_deref().unwrap_or(Path::new("?")).display()
                ))
            }),
        }
    }

    /// Like [`pick`](Self::pick) but the value must be present somewhere.
    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.pick(flag, key)?
            .ok_or_else(|| CliError::Validation(format!("--{key} is required")))
    }

    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}
