//! Layered configuration: struct defaults, then a JSON file, then `--set key=value`, then flags.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Builds `C` from its defaults overlaid with `file`, `sets` and `flags`.
/// Keys are dotted paths into the config object; unknown keys are rejected.
pub fn layered<C: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    sets: &[String],
    flags: Vec<(&str, Option<Value>)>,
) -> Result<C, CliError> {
    let mut value = serde_json::to_value(C::default()).map_err(|e| CliError::internal(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, over, "")?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, v)?;
    }
    for (key, v) in flags {
        if let Some(v) = v {
            set_path(&mut value, key, v)?;
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))
}

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(unknown(&path, b)),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("{:?} is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(unknown(key, obj));
        }
        cur = obj.get_mut(*part).unwrap();
    }
    *cur = v;
    Ok(())
}

fn unknown(key: &str, obj: &Map<String, Value>) -> CliError {
    let known: Vec<&str> = obj.keys().map(String::as_str).collect();
    CliError::config(format!("unknown config key {key:?} (known here: {})", known.join(", ")))
}

/// Flag value as JSON.
pub fn flag<V: Serialize>(v: &Option<V>) -> Option<Value> {
    v.as_ref().map(|x| serde_json::to_value(x).expect("flag values serialize"))
}
