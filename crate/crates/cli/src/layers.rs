//! Layered configuration: built-in default, then a config file (TOML, or a
//! previous run manifest), then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Flag values collected under dotted keys such as `train.epochs`.
#[derive(Debug, Default)]
pub struct Flags(Value);

impl Flags {
    pub fn new() -> Self {
        Flags(Value::Object(Map::new()))
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        let Some(value) = value else { return self };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let mut node = &mut self.0;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            let map = node.as_object_mut().expect("flag tree holds objects");
            if parts.peek().is_none() {
                map.insert(part.to_string(), value);
                break;
            }
            node = map.entry(part).or_insert_with(|| Value::Object(Map::new()));
        }
        self
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a config layer. A `.json` file is treated as a run manifest and its
/// recorded `config` is used; anything else is parsed as TOML.
pub fn read_layer(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return manifest.get("config").cloned().ok_or_else(|| {
            CliError::Config(format!("{}: manifest has no `config`", path.display()))
        });
    }
    let table: toml::Value =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))
}

pub fn resolve<T: Serialize + DeserializeOwned>(
    default: &T,
    file: Option<&Path>,
    flags: Flags,
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(default).expect("defaults serialize");
    if let Some(path) = file {
        merge(&mut value, read_layer(path)?);
    }
    merge(&mut value, flags.0);
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}
