//! `key=value` overrides applied to a JSON view of a config.

use serde_json::Value;

use crate::failure::Failure;

pub fn split_pair(raw: &str) -> Result<(&str, &str), Failure> {
    raw.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got {raw:?}")))
}

/// JSON if it parses, a plain string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the dotted `path` inside `root`. Every segment must already exist,
/// so a typo fails instead of being ignored.
pub fn apply(root: &mut Value, path: &str, raw: &str) -> Result<(), Failure> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = cur
            .get_mut(seg)
            .ok_or_else(|| Failure::Usage(format!("unknown config key {path:?}")))?;
    }
    let new = parse_value(raw);
    let compatible = matches!(
        (&*cur, &new),
        (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Null, _)
            | (_, Value::Null)
            | (Value::Object(_), Value::Object(_))
            | (Value::Object(_), Value::String(_))
            | (Value::String(_), Value::Object(_))
    );
    if !compatible {
        return Err(Failure::Usage(format!("{path}: cannot replace {cur} with {new}")));
    }
    *cur = new;
    Ok(())
}
