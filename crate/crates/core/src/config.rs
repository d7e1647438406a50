//! Flat `key=value` configuration files.
//!
//! ```text
//! # comment
//! seed = 7
//! prm.model.d_model = 16
//! prm.model.head_style = split
//! ```
//!
//! Dotted keys address nested fields of a serializable config. Values are read
//! as JSON when possible (`3`, `true`, `[64, 32]`, `null`) and as bare strings
//! otherwise. Unknown keys are configuration errors.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{PrmError, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| PrmError::Parse {
            line: i + 1,
            field: line.into(),
            message: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(PrmError::Parse {
                line: i + 1,
                field: String::new(),
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn coerce(existing: &Value, raw: &str) -> Value {
    if existing.is_string() {
        // a quoted value is unwrapped, anything else is taken verbatim
        return serde_json::from_str::<String>(raw)
            .map(Value::String)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `pairs` in order on top of `base`.
pub fn apply_overrides<C: Serialize + DeserializeOwned>(base: &C, pairs: &[(String, String)]) -> Result<C> {
    let mut root = serde_json::to_value(base)?;
    for (key, raw) in pairs {
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| PrmError::Config(format!("unknown configuration key `{key}`")))?;
        }
        *node = coerce(node, raw);
    }
    serde_json::from_value(root).map_err(|e| PrmError::Config(format!("invalid configuration: {e}")))
}
