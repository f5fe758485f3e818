//! Layered configuration: defaults, then a JSON file, then command-line
//! overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::input("config", e.to_string()))
}

fn as_object(v: Value, origin: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        Value::Null => Ok(Map::new()),
        other => Err(Error::input(origin, format!("expected a JSON object, got {other}"))),
    }
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>, origin: &str) -> Result<()> {
    for (key, value) in layer {
        if !base.contains_key(&key) {
            return Err(Error::input(key, format!("unknown key in {origin}")));
        }
        base.insert(key, value);
    }
    Ok(())
}

/// Builds `C` from its defaults, the optional config file, and overrides.
/// `overrides` should serialize unset options as absent keys.
pub fn resolve<C, O>(file: Option<&Path>, overrides: &O) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
    O: Serialize,
{
    let mut merged = as_object(to_value(&C::default())?, "defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Error::input(path.display().to_string(), e.to_string()))?;
        overlay(&mut merged, as_object(parsed, "config file")?, "config file")?;
    }
    overlay(&mut merged, as_object(to_value(overrides)?, "flags")?, "flags")?;
    serde_path_to_error::deserialize(Value::Object(merged)).map_err(|e| {
        let field = e.path().to_string();
        Error::input(field, e.into_inner().to_string())
    })
}
