//! Layered run configuration: built-in defaults, then a TOML or JSON file,
//! then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn load_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str::<Value>(&text).map_err(|e| e.to_string()),
        Some("json") => serde_json::from_str::<Value>(&text).map_err(|e| e.to_string()),
        _ => return Err(CliError::Usage(format!("config file {} must end in .toml or .json", path.display()))),
    };
    match parsed {
        Ok(v @ Value::Object(_)) => Ok(v),
        Ok(_) => Err(CliError::Usage(format!("config file {} must hold a table", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config file {}: {e}", path.display()))),
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
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

/// Builds a nested table from `(dotted.key, value)` pairs, skipping unset flags.
pub fn flags(pairs: Vec<(&str, Option<Value>)>) -> Value {
    let mut root = Value::Object(Map::new());
    for (key, value) in pairs {
        let Some(value) = value else { continue };
        let mut node = Value::Object(Map::new());
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        node.as_object_mut().unwrap().insert(leaf.to_string(), value);
        for part in parts.into_iter().rev() {
            let mut parent = Map::new();
            parent.insert(part.to_string(), node);
            node = Value::Object(parent);
        }
        merge(&mut root, node);
    }
    root
}

pub fn opt<T: Serialize>(value: &Option<T>) -> Option<Value> {
    value.as_ref().map(|v| serde_json::to_value(v).expect("flag serializes"))
}

/// Resolves `defaults < file < flags`. The defaults may depend on what the
/// user supplied (image size, training stage), so they are computed from the
/// user layer before merging.
pub fn resolve<T, D>(file: Option<&Path>, flags: Value, defaults: impl FnOnce(&Value) -> Result<D, CliError>) -> Result<T, CliError>
where
    T: DeserializeOwned,
    D: Serialize,
{
    let mut user = match file {
        Some(p) => load_file(p)?,
        None => Value::Object(Map::new()),
    };
    merge(&mut user, flags);
    let mut value = serde_json::to_value(defaults(&user)?).expect("defaults serialize");
    merge(&mut value, user);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// Looks up a dotted key in the user layer.
pub fn lookup<'a>(value: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(value, |v, k| v.get(k))
}

pub fn write_effective(dir: &Path, config: &impl Serialize) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
    let path = dir.join("effective_config.json");
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}
