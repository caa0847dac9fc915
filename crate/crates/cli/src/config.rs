//! Run configuration: JSON file over defaults, then `--set key=value` overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A command's configuration schema. Unknown keys are rejected by the serde derive.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    /// Range checks run after parsing and before any compute.
    fn validate(&self) -> Result<(), CliError> {
        Ok(())
    }

    /// Root seed echoed in the run manifest.
    fn seed(&self) -> u64;
}

/// Resolves a configuration with precedence overrides > file > defaults and returns it
/// together with its normalized JSON form.
pub fn resolve<T: CommandConfig>(file: Option<&Path>, overrides: &[String]) -> Result<(T, Value), CliError> {
    let base: T = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
                _ => CliError::usage(format!("cannot read {}: {e}", path.display())),
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => T::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for assignment in overrides {
        apply_override(&mut value, assignment)?;
    }
    let cfg: T = serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid override: {e}")))?;
    cfg.validate()?;
    let value = serde_json::to_value(&cfg)?;
    Ok((cfg, value))
}

/// Applies one `dotted.path=value` assignment. The value is parsed as JSON and falls
/// back to a string; object and array keys accept only a JSON value of the same shape.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {assignment:?} is not key=value")))?;
    let unknown = || CliError::usage(format!("unknown config key {path:?}"));
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(unknown)?;
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let same_shape = (node.is_object() && value.is_object()) || (node.is_array() && value.is_array());
    if (node.is_object() || node.is_array()) && !same_shape {
        return Err(CliError::usage(format!(
            "{path:?} needs a JSON {} value",
            if node.is_object() { "object" } else { "array" }
        )));
    }
    *node = value;
    Ok(())
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                write_canonical(&map[k.as_str()], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// SHA-256 of the command name and the canonical configuration, as hex.
pub fn config_hash(command: &str, config: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(b"\n");
    hasher.update(canonical_json(config).as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}
